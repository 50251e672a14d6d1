use iat_core::image_io::{image_to_tensor, tensor_to_image};
use iat_core::metrics::MetricReport;
use iat_core::model::{iat_forward, load_checkpoint, save_checkpoint, IatParams};
use iat_core::tensor::Eager;
use iat_core::training::{train_loop, write_log_csv, LossKind, Sample, TrainConfig};

use super::{override_model, read_config};
use crate::error::CliError;
use crate::pairs::load_samples;
use crate::TrainArgs;

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag.clone() { cfg.$field = v; })*
        };
    }
    set!(lr => lr0, weight_decay => weight_decay, batch_size => batch_size, steps => steps,
         crop_size => crop_size, loss => loss, lambda_raw => lambda_raw, w_percep => w_percep,
         seed => seed, val_every => val_every);
    cfg.frozen.extend(args.freeze.iter().cloned());
    if args.no_hflip {
        cfg.hflip = false;
    }
    if args.no_vflip {
        cfg.vflip = false;
    }
    cfg.prefetch |= args.prefetch;
    override_model(&mut cfg.model, args.channels, args.blocks, args.dim);
    cfg.validate()?;
    Ok(cfg)
}

fn score(params: &IatParams<f32>, data: &[Sample]) -> Result<MetricReport, CliError> {
    let mut report = MetricReport::default();
    for (i, s) in data.iter().enumerate() {
        let out = iat_forward(&Eager, &image_to_tensor::<f32>(&s.input), params, false)?.out;
        report.push(format!("{i}"), &tensor_to_image(&out)?, &s.target)?;
    }
    Ok(report)
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let need_raw = cfg.loss == LossKind::MixedRaw;
    let train = load_samples(&args.data, need_raw)?;
    let val = match &args.val {
        Some(dir) => load_samples(dir, false)?,
        None => Vec::new(),
    };
    let init = args.init.as_ref().map(load_checkpoint).transpose()?;
    let quiet = args.quiet;
    let outcome = train_loop(&train, &val, &cfg, init, |row| {
        if let (false, Some(p)) = (quiet, row.psnr_val) {
            let loss = row.loss.map(|l| format!("{l:.5e}")).unwrap_or_else(|| "-".into());
            println!("step {:>6}  lr {:.3e}  loss {loss}  psnr_val {p:.3}", row.step, row.lr);
        }
    })?;
    save_checkpoint(&outcome.best, &args.out)?;
    let log = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    write_log_csv(&log, &outcome.log)?;

    let (scored, set) = if val.is_empty() { (&train, "train") } else { (&val, "val") };
    let report = score(&outcome.best.params, scored)?;
    println!("best checkpoint: step {} -> {}", outcome.best.step, args.out.display());
    println!("metrics log: {}", log.display());
    println!("final psnr {:.3} dB  ssim {:.4}  ({set})", report.mean_psnr(), report.mean_ssim());
    Ok(())
}
