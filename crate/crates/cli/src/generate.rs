use std::fmt::Write as _;

use sparsed::analysis::{attention_pgm, matrix_pgm, matrix_to_csv, SimilarityReport};
use sparsed::scheduler::{traces_to_csv, ScheduleOptions};
use sparsed::{generate, BlockMask, GenerateOptions, GenerateOutput, ScheduleMode};

use crate::args::GenerateArgs;
use crate::common::{
    load_model, resolve_prompt, schedule_mode, sparse_config, tokens_text, CliResult, OutputDir,
};
use crate::manifest::{generate_flags, RunManifest, MANIFEST_FILE};

/// Masks that governed the sparse steps, keyed by `(layer, head)`.
pub fn final_masks(mode: ScheduleMode, out: &GenerateOutput) -> Vec<((usize, usize), BlockMask)> {
    if !out.run.cache.is_empty() {
        return out.run.cache.iter().map(|(&k, m)| (k, m.clone())).collect();
    }
    match (mode, out.run.applied_masks.last()) {
        (ScheduleMode::Dense, _) | (_, None) => Vec::new(),
        (_, Some((_, layers))) => layers
            .iter()
            .enumerate()
            .flat_map(|(l, heads)| {
                heads
                    .iter()
                    .enumerate()
                    .map(move |(h, m)| ((l, h), m.clone()))
            })
            .collect(),
    }
}

pub fn run(args: &GenerateArgs) -> CliResult<()> {
    let config = sparse_config(&args.sparse)?;
    let mode = schedule_mode(args.mode, &args.baseline)?;
    let model = load_model(&args.model, args.sequence.seq_len)?;
    let (prompt, gen_len) = resolve_prompt(&args.sequence, model.config())?;

    let record_masks = matches!(
        mode,
        ScheduleMode::RecomputeEveryStep
            | ScheduleMode::SlidingWindow { .. }
            | ScheduleMode::Streaming { .. }
    );
    let options = GenerateOptions {
        schedule: ScheduleOptions {
            record_masks,
            ..ScheduleOptions::default()
        },
        record_logits: false,
        dump_attention: args.dump_attn,
    };
    let out = generate(&model, &prompt, gen_len, mode, &config, &options)?;

    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("tokens.txt", tokens_text(&out.tokens))?;
    dir.write("trace.csv", traces_to_csv(out.traces()))?;

    let masks = final_masks(mode, &out);
    for ((layer, head), mask) in &masks {
        dir.write(&format!("masks/layer{layer}_head{head}.csv"), mask.to_csv())?;
    }

    if args.dump_attn {
        for d in &out.attention_dumps {
            let name = format!("attn/step{:03}_layer{}_head{}.pgm", d.step, d.layer, d.head);
            dir.write(&name, attention_pgm(&d.probs, out.prefill_len)?)?;
        }
        let report = SimilarityReport::from_dumps(&out.attention_dumps)?;
        let mut summary = String::from("layer,head,mean_off_diagonal\n");
        let means = report.mean_off_diagonal();
        for (&(layer, head), sim) in &report.per_head {
            dir.write(
                &format!("similarity/layer{layer}_head{head}.csv"),
                matrix_to_csv(sim),
            )?;
            dir.write(
                &format!("similarity/layer{layer}_head{head}.pgm"),
                matrix_pgm(sim),
            )?;
            let _ = writeln!(summary, "{layer},{head},{:.6}", means[&(layer, head)]);
        }
        dir.write("similarity/summary.csv", summary)?;
    }

    let total_flops: u64 = out.traces().iter().map(|t| t.attention_flops()).sum();
    let mean_density = if masks.is_empty() {
        1.0
    } else {
        masks.iter().map(|(_, m)| m.density()).sum::<f64>() / masks.len() as f64
    };

    let mut manifest = RunManifest::new("generate");
    manifest.set_flags(&generate_flags(args));
    manifest.set_model(model.config());
    manifest.set("mode", mode.name());
    manifest.set(
        "prompt",
        if args.sequence.prompt_file.is_some() {
            "file"
        } else {
            "synthetic"
        },
    );
    manifest.set("prefill_len", out.prefill_len);
    manifest.set("gen_len", gen_len);
    if !matches!(mode, ScheduleMode::Dense) {
        manifest.set("mean_density", format!("{mean_density:.6}"));
    }
    if let Some(step) = out.run.cache.captured_at_step() {
        manifest.set("capture_step", step);
    }
    manifest.set("attention_flops", total_flops);
    manifest.set("out_dir", dir.root().display());
    let mut files = dir.files().to_vec();
    files.push(MANIFEST_FILE.to_string());
    manifest.set_files(&files);
    dir.write(MANIFEST_FILE, manifest.to_text())?;

    println!(
        "generate: mode={} steps={} prefill={} generated={} attention_flops={} files={} dir={}",
        mode.name(),
        config.total_steps,
        out.prefill_len,
        gen_len,
        total_flops,
        files.len(),
        dir.root().display()
    );
    Ok(())
}
