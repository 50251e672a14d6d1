use iat_core::image_io::{image_to_tensor, load_image, tensor_to_image, ImageRGB};
use iat_core::metrics::MetricReport;
use iat_core::model::{iat_forward, load_checkpoint, IatParams};
use iat_core::tensor::Eager;
use iat_core::Error;

use super::write_file;
use crate::error::{usage, CliError};
use crate::pairs::{discover, PairFiles};
use crate::EvalArgs;

fn predict(params: &IatParams<f32>, pair: &PairFiles, local_only: bool) -> Result<(ImageRGB, ImageRGB), Error> {
    let input = load_image(&pair.input)?;
    let target = load_image(&pair.target)?;
    let out = iat_forward(&Eager, &image_to_tensor::<f32>(&input), params, local_only)?.out;
    Ok((tensor_to_image(&out)?, target))
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let params = load_checkpoint(&args.checkpoint)?.params;
    let pairs = discover(&args.pairs)?;
    if pairs.is_empty() {
        return Err(usage(format!("{}: no input_*/target_* pairs found", args.pairs.display())));
    }
    let mut report = MetricReport::default();
    for pair in &pairs {
        let scored = predict(&params, pair, args.local_only).and_then(|(pred, target)| report.push(&pair.id, &pred, &target));
        match scored {
            Ok(()) => {
                let e = report.entries.last().expect("just pushed");
                println!("{}: psnr {:.3} dB  ssim {:.4}", e.name, e.psnr, e.ssim);
            }
            Err(e) => eprintln!("warning: skipped pair {}: {e}", pair.id),
        }
    }
    if report.entries.is_empty() {
        return Err(CliError::Runtime(Error::Input("no pair could be evaluated".into())));
    }
    println!("mean: psnr {:.3} dB  ssim {:.4}  ({} pair(s))", report.mean_psnr(), report.mean_ssim(), report.entries.len());
    if let Some(csv) = &args.csv {
        write_file(csv, report.to_csv())?;
    }
    Ok(())
}
