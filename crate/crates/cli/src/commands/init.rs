use iat_core::model::{save_checkpoint, Checkpoint, IatParams};
use iat_core::rng::{stream, streams};
use iat_core::training::TrainConfig;

use super::{override_model, read_config};
use crate::error::CliError;
use crate::InitArgs;

pub fn run(args: &InitArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => TrainConfig::default(),
    };
    override_model(&mut cfg.model, args.channels, args.blocks, args.dim);
    let seed = args.seed.unwrap_or(cfg.seed);
    let params = IatParams::init(cfg.model, &mut stream(seed, streams::MODEL_INIT))?;
    save_checkpoint(&Checkpoint::new(params, 0), &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
