use iat_core::model::{estimate_flops, load_checkpoint, IatParams};
use iat_core::rng::stream;

use super::read_config;
use crate::error::CliError;
use crate::InfoArgs;

pub fn run(args: &InfoArgs) -> Result<(), CliError> {
    let params = match (&args.checkpoint, &args.config) {
        (Some(path), _) => load_checkpoint(path)?.params,
        (None, Some(path)) => IatParams::<f32>::init(read_config(path)?.model, &mut stream(0, 0))?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let config = params.config();
    let report = params.count_params();
    let (h, w) = args.resolution;
    let flops = estimate_flops(config, h, w)?;

    println!("config: channels={} blocks={} dim={}", config.channels, config.blocks, config.dim);
    println!("parameters by module:");
    for (module, n) in &report.modules {
        println!("  {module:<24} {n:>8}");
    }
    println!("params local:  {}", report.local);
    println!("params global: {}", report.global);
    println!("params total:  {}", report.total);
    println!("gflops @{h}x{w} local:  {:.4}", flops.local);
    println!("gflops @{h}x{w} global: {:.4}", flops.global);
    println!("gflops @{h}x{w} total:  {:.4}", flops.total);
    Ok(())
}
