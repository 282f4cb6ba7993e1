use std::fmt::Write as _;

use sparsed::analysis::flop_ratio_model;
use sparsed::scheduler::ScheduleOptions;
use sparsed::toydlm::synthetic_prompt;
use sparsed::{generate, GenerateOptions, ScheduleMode};

use crate::args::{BenchArgs, ModeName};
use crate::common::{
    load_model, mean, median, schedule_mode, sparse_config, stddev, usage, CliResult, OutputDir,
};
use crate::generate::final_masks;
use crate::manifest::{bench_flags, RunManifest, MANIFEST_FILE};

pub const BENCH_CSV_HEADER: &str = "seq_len,mode,mean_step_ns,stddev_step_ns,median_step_ns,total_flops,flop_ratio,predicted_flop_ratio,density,speedup";

struct Row {
    seq_len: usize,
    mode: &'static str,
    step_ns: Vec<f64>,
    total_flops: u64,
    predicted: Option<f64>,
    density: f64,
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    if args.seq_lens.is_empty() {
        return usage("--seq-lens needs at least one length");
    }
    if args.repeats == 0 {
        return usage("--repeats must be at least 1");
    }
    let config = sparse_config(&args.sparse)?;
    let mut modes = vec![ModeName::Dense];
    for &m in &args.modes {
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    let uses_window = modes
        .iter()
        .any(|m| matches!(m, ModeName::Window | ModeName::Streaming));
    if args.baseline.window.is_some() && !uses_window {
        return usage("--window given but no window or streaming mode requested");
    }
    if args.baseline.sink.is_some() && !modes.contains(&ModeName::Streaming) {
        return usage("--sink given but streaming mode not requested");
    }
    let schedule: Vec<(ModeName, ScheduleMode)> = modes
        .iter()
        .map(|&m| {
            let baseline = match m {
                ModeName::Window => crate::args::BaselineArgs {
                    window: args.baseline.window,
                    sink: None,
                },
                ModeName::Streaming => args.baseline.clone(),
                _ => crate::args::BaselineArgs {
                    window: None,
                    sink: None,
                },
            };
            schedule_mode(m, &baseline).map(|s| (m, s))
        })
        .collect::<CliResult<_>>()?;
    for &l in &args.seq_lens {
        if l < 2 {
            return usage(format!("sequence length {l} leaves nothing to generate"));
        }
    }
    let max_len = args.seq_lens.iter().copied().max().unwrap_or(0);
    let model = load_model(&args.model, max_len)?;

    let mut rows = Vec::new();
    for &seq_len in &args.seq_lens {
        let prefill = seq_len / 2;
        let prompt = synthetic_prompt(prefill, model.config().vocab_size, model.config().seed);
        for &(name, mode) in &schedule {
            let options = GenerateOptions {
                schedule: ScheduleOptions {
                    record_masks: matches!(
                        mode,
                        ScheduleMode::RecomputeEveryStep
                            | ScheduleMode::SlidingWindow { .. }
                            | ScheduleMode::Streaming { .. }
                    ),
                    ..ScheduleOptions::default()
                },
                ..GenerateOptions::default()
            };
            let mut step_ns = Vec::new();
            let mut total_flops = 0;
            let mut density = 1.0;
            for rep in 0..args.repeats {
                let out = generate(&model, &prompt, seq_len - prefill, mode, &config, &options)?;
                step_ns.extend(out.traces().iter().map(|t| t.wall_ns as f64));
                if rep == 0 {
                    total_flops = out.traces().iter().map(|t| t.attention_flops()).sum();
                    let masks = final_masks(mode, &out);
                    if !masks.is_empty() {
                        density = masks.iter().map(|(_, m)| m.density()).sum::<f64>()
                            / masks.len() as f64;
                    }
                }
            }
            let predicted = matches!(name, ModeName::Sparsed | ModeName::Joint)
                .then(|| flop_ratio_model(&config, density));
            rows.push(Row {
                seq_len,
                mode: name.as_str(),
                step_ns,
                total_flops,
                predicted,
                density,
            });
        }
    }

    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        let dense = rows
            .iter()
            .find(|r| r.seq_len == row.seq_len && r.mode == "dense")
            .expect("dense reference row");
        let m = mean(&row.step_ns);
        let _ = writeln!(
            csv,
            "{},{},{:.1},{:.1},{:.1},{},{:.6},{},{:.6},{:.4}",
            row.seq_len,
            row.mode,
            m,
            stddev(&row.step_ns),
            median(&row.step_ns),
            row.total_flops,
            row.total_flops as f64 / dense.total_flops as f64,
            row.predicted.map_or(String::new(), |p| format!("{p:.6}")),
            row.density,
            if row.mode == "dense" {
                1.0
            } else {
                mean(&dense.step_ns) / m
            },
        );
    }

    let mut dir = OutputDir::create(&args.out_dir)?;
    dir.write("bench.csv", &csv)?;
    let mut manifest = RunManifest::new("bench");
    manifest.set_flags(&bench_flags(args));
    manifest.set_model(model.config());
    if args.repeats < 3 {
        manifest.set(
            "warning",
            format!(
                "repeats={} is below 3; timing statistics are unreliable",
                args.repeats
            ),
        );
        eprintln!(
            "warning: --repeats {} is below 3; timing statistics are unreliable",
            args.repeats
        );
    }
    manifest.set("out_dir", dir.root().display());
    let mut files = dir.files().to_vec();
    files.push(MANIFEST_FILE.to_string());
    manifest.set_files(&files);
    dir.write(MANIFEST_FILE, manifest.to_text())?;
    print!("{csv}");
    Ok(())
}
