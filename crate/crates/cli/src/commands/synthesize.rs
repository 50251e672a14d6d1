use iat_core::image_io::{decode_png, encode_png, is_supported_image, load_image, save_pfm, ImageRGB};
use iat_core::isp::{degrade, sample_degradation, synthetic_scene};
use iat_core::rng::{stream, streams};

use super::{create_dir, write_file};
use crate::error::{usage, CliError};
use crate::pairs::list_dir;
use crate::SynthesizeArgs;

pub fn run(args: &SynthesizeArgs) -> Result<(), CliError> {
    let clean: Vec<ImageRGB> = match (&args.clean, args.procedural) {
        (Some(dir), _) => {
            let files: Vec<_> = list_dir(dir)?.into_iter().filter(|p| is_supported_image(p)).collect();
            if files.is_empty() {
                return Err(usage(format!("{}: no clean .png or .ppm images", dir.display())));
            }
            files.iter().map(load_image).collect::<Result<_, _>>()?
        }
        (None, Some((h, w))) => {
            let n = args.count.ok_or_else(|| usage("--procedural needs --count"))?;
            (0..n as u64)
                .map(|i| {
                    let scene = synthetic_scene(&mut stream(args.seed, streams::SCENE_BASE + i), h, w);
                    // Targets are stored as 8-bit images; degrade what is stored.
                    decode_png(&encode_png(&scene)?)
                })
                .collect::<Result<_, _>>()?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let count = args.count.unwrap_or(clean.len());
    if count == 0 {
        return Err(usage("--count must be ≥ 1"));
    }
    create_dir(&args.out)?;

    for i in 0..count {
        let mut rng = stream(args.seed, streams::SYNTH_BASE + i as u64);
        let mut dp = sample_degradation(&mut rng, args.profile);
        if let Some(sigma) = args.noise_sigma {
            dp.noise_sigma = sigma;
        }
        let target = &clean[i % clean.len()];
        let (input, raw) = degrade(target, &dp, &mut rng)?;
        write_file(&args.out.join(format!("input_{i:04}.png")), encode_png(&input)?)?;
        write_file(&args.out.join(format!("target_{i:04}.png")), encode_png(target)?)?;
        save_pfm(args.out.join(format!("raw_{i:04}.pfm")), raw.height, raw.width, &raw.data)?;
        let json = serde_json::to_string_pretty(&dp).expect("degradation params serialize");
        write_file(&args.out.join(format!("params_{i:04}.json")), json + "\n")?;
    }
    println!("wrote {count} sample(s) to {}", args.out.display());
    Ok(())
}
