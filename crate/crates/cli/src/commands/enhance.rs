use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use iat_core::image_io::{image_to_tensor, is_supported_image, load_image, save_image, tensor_to_image};
use iat_core::model::{iat_forward, load_checkpoint, IatParams};
use iat_core::tensor::Eager;
use iat_core::Error;

use super::create_dir;
use crate::error::{usage, CliError};
use crate::pairs::list_dir;
use crate::EnhanceArgs;

fn enhance_one(params: &IatParams<f32>, input: &Path, output: &Path, local_only: bool) -> Result<(usize, usize), Error> {
    let img = load_image(input)?;
    let x = image_to_tensor::<f32>(&img);
    let out = iat_forward(&Eager, &x, params, local_only)?;
    save_image(&tensor_to_image(&out.out)?, output)?;
    Ok((img.height(), img.width()))
}

fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_dir() {
        let files: Vec<PathBuf> = list_dir(input)?.into_iter().filter(|p| is_supported_image(p)).collect();
        if files.is_empty() {
            return Err(usage(format!("{}: no .png or .ppm images", input.display())));
        }
        Ok(files)
    } else if input.exists() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(usage(format!("{}: no such file or directory", input.display())))
    }
}

pub fn run(args: &EnhanceArgs) -> Result<(), CliError> {
    let params = load_checkpoint(&args.checkpoint)?.params;
    let inputs = collect_inputs(&args.input)?;
    create_dir(&args.output)?;

    type Outcome = Result<((usize, usize), Duration), Error>;
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = (args.threads as usize).min(inputs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(input) = inputs.get(i) else { break };
                let output = args.output.join(input.file_name().expect("listed files have names"));
                let start = Instant::now();
                let r = enhance_one(&params, input, &output, args.local_only).map(|dims| (dims, start.elapsed()));
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });

    let mut ok = 0;
    for (input, r) in inputs.iter().zip(results.into_inner().expect("worker panicked")) {
        match r.expect("every input processed") {
            Ok(((h, w), t)) => {
                ok += 1;
                println!("{}: {h}x{w} in {:.1} ms", input.display(), t.as_secs_f64() * 1e3);
            }
            Err(e) => eprintln!("warning: skipped {}: {e}", input.display()),
        }
    }
    println!("enhanced {ok} of {} image(s) into {}", inputs.len(), args.output.display());
    if ok == 0 {
        return Err(CliError::Runtime(Error::Input("no input could be enhanced".into())));
    }
    Ok(())
}
