use fbc_core::datasets::{write_bundle, DatasetManifest};
use log::info;

use crate::config::{create_dir, write_json, DataSource, RunConfig, SNAPSHOT_FILE};
use crate::error::{CliError, Result};
use crate::{GenDataArgs, GeneratorKind};

const DEFAULT_IMAGES: usize = 1000;
const DEFAULT_RESOLUTION: usize = 64;

/// Samples the requested generator and writes a dataset bundle to `--out`.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<DatasetManifest> {
    let from_config = RunConfig::load(args.config.as_deref())?.data;
    let mut source = match (args.kind, from_config) {
        (GeneratorKind::SyntheticTabular, Some(s @ DataSource::SyntheticTabular { .. }))
        | (GeneratorKind::DspritesUnfair, Some(s @ DataSource::DspritesUnfair { .. })) => s,
        (_, Some(other)) => {
            return Err(CliError::Usage(format!("config data {other:?} does not match --kind {:?}", args.kind)))
        }
        (GeneratorKind::SyntheticTabular, None) => DataSource::default(),
        (GeneratorKind::DspritesUnfair, None) => {
            DataSource::DspritesUnfair { n: DEFAULT_IMAGES, resolution: DEFAULT_RESOLUTION, seed: 0 }
        }
    };
    match &mut source {
        DataSource::SyntheticTabular { n, seed, .. } => {
            if args.res.is_some() {
                return Err(CliError::Usage("--res applies to dsprites-unfair only".into()));
            }
            *n = args.n.unwrap_or(*n);
            *seed = args.seed.unwrap_or(*seed);
        }
        DataSource::DspritesUnfair { n, resolution, seed } => {
            *n = args.n.unwrap_or(*n);
            *resolution = args.res.unwrap_or(*resolution);
            *seed = args.seed.unwrap_or(*seed);
        }
        DataSource::Bundle { .. } | DataSource::Csv { .. } => unreachable!("generators only"),
    }

    let batch = source.load()?;
    create_dir(&args.out)?;
    let generator = serde_json::to_value(&source).expect("data sources serialize");
    let manifest = write_bundle(&args.out, &batch, generator)?;
    let snapshot = RunConfig { command: Some("gen-data".into()), data: Some(source), ..RunConfig::default() };
    write_json(&args.out.join(SNAPSHOT_FILE), &snapshot)?;
    info!("wrote {} samples to {}", manifest.samples, args.out.display());
    Ok(manifest)
}
