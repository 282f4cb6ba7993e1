use std::fmt::Write as _;

use sparsed::analysis::{mean_logit_error, token_agreement};
use sparsed::{generate, GenerateOptions, ScheduleMode, SparseDConfig};

use crate::args::{AblateArgs, SweepParam};
use crate::common::{
    load_model, mean, resolve_prompt, sparse_config, usage, CliError, CliResult, OutputDir,
};
use crate::manifest::{ablate_flags, RunManifest, MANIFEST_FILE};

pub const ABLATE_CSV_HEADER: &str =
    "sweep,value,token_agreement,logit_rel_error,density,mean_step_ns";

pub fn run(args: &AblateArgs) -> CliResult<()> {
    if args.values.is_empty() {
        return usage("--values needs at least one value to sweep");
    }
    let base = sparse_config(&args.sparse)?;
    let configs: Vec<SparseDConfig> = args
        .values
        .iter()
        .map(|&v| {
            let (rho, skip) = match args.sweep {
                SweepParam::Rho => (v, base.skip),
                SweepParam::Skip => (base.rho, v),
            };
            SparseDConfig::new(rho, skip, base.block_size, base.total_steps)
                .map_err(|e| CliError::Usage(format!("{} = {v}: {e}", args.sweep.as_str())))
        })
        .collect::<CliResult<_>>()?;
    let model = load_model(&args.model, args.sequence.seq_len)?;
    let (prompt, gen_len) = resolve_prompt(&args.sequence, model.config())?;

    let options = GenerateOptions {
        record_logits: true,
        ..GenerateOptions::default()
    };
    let dense = generate(
        &model,
        &prompt,
        gen_len,
        ScheduleMode::Dense,
        &base,
        &options,
    )?;

    let mut csv = String::from(ABLATE_CSV_HEADER);
    csv.push('\n');
    for (value, config) in args.values.iter().zip(&configs) {
        let out = generate(
            &model,
            &prompt,
            gen_len,
            ScheduleMode::SparseD,
            config,
            &options,
        )?;
        let agreement = token_agreement(&out.tokens, &dense.tokens, out.prefill_len);
        let logit_error = mean_logit_error(&out.step_logits, &dense.step_logits)?;
        let densities: Vec<f64> = out.run.cache.iter().map(|(_, m)| m.density()).collect();
        let step_ns: Vec<f64> = out.traces().iter().map(|t| t.wall_ns as f64).collect();
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6e},{:.6},{:.1}",
            args.sweep.as_str(),
            value,
            agreement,
            logit_error,
            mean(&densities),
            mean(&step_ns)
        );
    }

    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("ablate.csv", &csv)?;
    let mut manifest = RunManifest::new("ablate");
    manifest.set_flags(&ablate_flags(args));
    manifest.set_model(model.config());
    manifest.set("prefill_len", prompt.len());
    manifest.set("gen_len", gen_len);
    manifest.set("out_dir", dir.root().display());
    let mut files = dir.files().to_vec();
    files.push(MANIFEST_FILE.to_string());
    manifest.set_files(&files);
    dir.write(MANIFEST_FILE, manifest.to_text())?;
    print!("{csv}");
    Ok(())
}
