//! Drivers for `run`, `ablation`, and `gen-data`, plus the table/report
//! writers they share.

use std::fs;
use std::path::{Path, PathBuf};

use cahqp_core::pipeline::{
    ablation_grid, pretrain_cloud, run_collaboration_cycle_from, save_snapshot, ComponentFlags,
    CycleReport, ExperimentConfig, Stream,
};
use cahqp_core::synthdata::{build_benchmark, generate_scene, write_dataset, SceneSample};

use crate::{Failure, GenDataArgs, Overrides, RunArgs};

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text).map_err(Failure::from_core)?;
    overrides.apply(&mut cfg);
    cfg.validate().map_err(Failure::from_core)?;
    Ok(cfg)
}

pub fn resolve_out(explicit: &Option<PathBuf>, name: &str, kind: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => std::env::var_os(crate::OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name)
            .join(kind),
    }
}

struct StepBudget {
    pretrain: usize,
    adapt_per_stream: usize,
    edge_per_stream: usize,
    streams: usize,
    seeds: usize,
}

impl StepBudget {
    fn of(cfg: &ExperimentConfig) -> Self {
        let b = cfg.optim.batch_size;
        let src_steps = cfg.dataset.source_images.div_ceil(b);
        StepBudget {
            pretrain: (cfg.schedule.pretrain_epochs + cfg.schedule.settle_epochs) * src_steps,
            adapt_per_stream: cfg.schedule.adapt_epochs * src_steps,
            edge_per_stream: cfg.schedule.edge_epochs
                * cfg.dataset.target_adapt_images.div_ceil(b),
            streams: cfg.dataset.targets.len(),
            seeds: cfg.seeds.len(),
        }
    }

    fn per_seed(&self) -> usize {
        self.pretrain + self.streams * (self.adapt_per_stream + self.edge_per_stream)
    }

    fn render(&self, cells: usize) -> String {
        format!(
            "estimated step count: {} pretrain + {} streams x ({} adapt + {} edge) \
             = {} per seed; {} seeds x {} cells -> {} total\n",
            self.pretrain,
            self.streams,
            self.adapt_per_stream,
            self.edge_per_stream,
            self.per_seed(),
            self.seeds,
            cells,
            (self.pretrain + cells * self.streams * (self.adapt_per_stream + self.edge_per_stream))
                * self.seeds,
        )
    }
}

fn effective_toml(cfg: &ExperimentConfig) -> Result<String, Failure> {
    toml::to_string_pretty(cfg).map_err(|e| Failure::Runtime(e.to_string()))
}

fn dry_run(cfg: &ExperimentConfig, cells: usize) -> Result<(), Failure> {
    print!("{}", effective_toml(cfg)?);
    print!("{}", StepBudget::of(cfg).render(cells));
    Ok(())
}

fn build_streams(cfg: &ExperimentConfig) -> Result<Vec<Stream>, Failure> {
    let (source, targets) = build_benchmark(&cfg.dataset).map_err(Failure::from_core)?;
    Ok(targets
        .into_iter()
        .map(|target| Stream { source: source.clone(), target })
        .collect())
}

fn write_jsonl(path: &Path, reports: &[CycleReport]) -> Result<(), Failure> {
    let mut buf = String::new();
    for r in reports {
        buf.push_str(&serde_json::to_string(r).map_err(|e| Failure::Runtime(e.to_string()))?);
        buf.push('\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Left-align the first column, right-align the rest, two-space gutters.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = |c: usize| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(width).collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[0]));
            } else {
                line.push_str(&format!("  {cell:>w$}", w = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Seeds as rows, streams as columns, a Mean column, and a closing mean row.
fn metric_block(
    title: &str,
    reports: &[CycleReport],
    seeds: &[u64],
    streams: &[String],
    get: fn(&CycleReport) -> f64,
) -> String {
    let cell = |seed: u64, stream: &str| -> f64 {
        let vals: Vec<f64> = reports
            .iter()
            .filter(|r| r.seed == seed && r.stream == stream)
            .map(get)
            .collect();
        mean(&vals)
    };
    let mut rows = Vec::new();
    let mut header = vec!["seed".to_string()];
    header.extend(streams.iter().cloned());
    header.push("Mean".into());
    rows.push(header);
    for &seed in seeds {
        let vals: Vec<f64> = streams.iter().map(|s| cell(seed, s)).collect();
        let mut row = vec![seed.to_string()];
        row.extend(vals.iter().map(|v| format!("{v:.2}")));
        row.push(format!("{:.2}", mean(&vals)));
        rows.push(row);
    }
    if seeds.len() > 1 {
        let per_stream: Vec<f64> = streams
            .iter()
            .map(|s| mean(&seeds.iter().map(|&sd| cell(sd, s)).collect::<Vec<_>>()))
            .collect();
        let mut row = vec!["mean".to_string()];
        row.extend(per_stream.iter().map(|v| format!("{v:.2}")));
        row.push(format!("{:.2}", mean(&per_stream)));
        rows.push(row);
    }
    format!("{title}\n{}", aligned(&rows))
}

fn run_summary(cfg: &ExperimentConfig, reports: &[CycleReport]) -> String {
    let streams: Vec<String> = cfg.dataset.targets.iter().map(|t| t.tag.clone()).collect();
    format!(
        "{}  flags={}  tau={:.2}  adapt_epochs={}\n\n{}\n{}",
        cfg.name,
        cfg.components.label(),
        cfg.adversarial.tau,
        cfg.schedule.adapt_epochs,
        metric_block("pseudo-label mAP", reports, &cfg.seeds, &streams, |r| r.pseudo_label_map),
        metric_block("edge mAP", reports, &cfg.seeds, &streams, |r| r.edge_map),
    )
}

pub fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, &args.overrides)?;
    if args.dry_run {
        return dry_run(&cfg, 1);
    }
    let out = resolve_out(&args.out, &cfg.name, "run");
    let snap_dir = out.join("snapshots");
    fs::create_dir_all(&snap_dir)?;
    fs::write(out.join("effective_config.toml"), effective_toml(&cfg)?)?;

    let streams = build_streams(&cfg)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let state = pretrain_cloud(&cfg, &streams[0].source, seed).map_err(Failure::from_core)?;
        let (reports, _) = run_collaboration_cycle_from(state, &streams, &cfg, seed, |st, _| {
            save_snapshot(&snap_dir.join(format!("seed{seed}_cycle{}.bin", st.cycle)), st)
        })
        .map_err(Failure::from_core)?;
        all.extend(reports);
    }

    write_jsonl(&out.join("reports.jsonl"), &all)?;
    let summary = run_summary(&cfg, &all);
    fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

fn marks(f: &ComponentFlags) -> [&'static str; 3] {
    let m = |b| if b { "+" } else { "-" };
    [m(f.dqfa), m(f.tiafa), m(f.vpg)]
}

fn ablation_summary(cfg: &ExperimentConfig, reports: &[CycleReport]) -> String {
    let cell_reports = |flags: &ComponentFlags, seed: Option<u64>| -> Vec<&CycleReport> {
        reports
            .iter()
            .filter(|r| r.flags == *flags && seed.map_or(true, |s| r.seed == s))
            .collect()
    };
    let mut rows = vec![
        ["DQFA", "TIAFA", "VPG", "pseudo-label mAP", "edge mAP"].map(String::from).to_vec(),
    ];
    for flags in ablation_grid() {
        let rs = cell_reports(&flags, None);
        let [d, t, v] = marks(&flags);
        rows.push(vec![
            d.into(),
            t.into(),
            v.into(),
            format!("{:.2}", mean(&rs.iter().map(|r| r.pseudo_label_map).collect::<Vec<_>>())),
            format!("{:.2}", mean(&rs.iter().map(|r| r.edge_map).collect::<Vec<_>>())),
        ]);
    }
    let mut detail = vec![
        ["cell", "seed", "pseudo-label mAP", "edge mAP"].map(String::from).to_vec(),
    ];
    for flags in ablation_grid() {
        for &seed in &cfg.seeds {
            let rs = cell_reports(&flags, Some(seed));
            detail.push(vec![
                flags.label(),
                seed.to_string(),
                format!("{:.2}", mean(&rs.iter().map(|r| r.pseudo_label_map).collect::<Vec<_>>())),
                format!("{:.2}", mean(&rs.iter().map(|r| r.edge_map).collect::<Vec<_>>())),
            ]);
        }
    }
    format!(
        "ablation: {}  tau={:.2}  adapt_epochs={}  seeds={:?}\n\n{}\nper-seed detail\n{}",
        cfg.name,
        cfg.adversarial.tau,
        cfg.schedule.adapt_epochs,
        cfg.seeds,
        aligned(&rows),
        aligned(&detail),
    )
}

pub fn cmd_ablation(args: RunArgs) -> Result<(), Failure> {
    let base = load_config(&args.config, &args.overrides)?;
    if args.dry_run {
        return dry_run(&base, ablation_grid().len());
    }
    let out = resolve_out(&args.out, &base.name, "ablation");
    fs::create_dir_all(&out)?;
    fs::write(out.join("effective_config.toml"), effective_toml(&base)?)?;

    let streams = build_streams(&base)?;
    let mut all = Vec::new();
    for &seed in &base.seeds {
        // Pretraining is supervised source-only and identical for every
        // cell, so each cell starts from a clone of one pretrained state.
        let pretrained =
            pretrain_cloud(&base, &streams[0].source, seed).map_err(Failure::from_core)?;
        for flags in ablation_grid() {
            let mut cfg = base.clone();
            cfg.components = flags;
            let (reports, _) =
                run_collaboration_cycle_from(pretrained.clone(), &streams, &cfg, seed, |_, _| {
                    Ok(())
                })
                .map_err(Failure::from_core)?;
            all.extend(reports);
        }
    }

    write_jsonl(&out.join("ablation.jsonl"), &all)?;
    let summary = ablation_summary(&base, &all);
    fs::write(out.join("ablation_summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, &Overrides::default())?;
    let out = resolve_out(&args.out, &cfg.name, "data");
    let d = &cfg.dataset;
    let scenes = |spec: &cahqp_core::synthdata::DomainSpec,
                  range: std::ops::Range<u64>|
     -> Vec<SceneSample> { range.map(|i| generate_scene(spec, i)).collect() };

    write_dataset(&out.join("source"), "source", &scenes(&d.source, 0..d.source_images as u64))
        .map_err(Failure::from_core)?;
    let (a, e) = (d.target_adapt_images as u64, d.target_eval_images as u64);
    for spec in &d.targets {
        let dir = out.join(&spec.tag);
        write_dataset(&dir, "adapt", &scenes(spec, 0..a)).map_err(Failure::from_core)?;
        write_dataset(&dir, "eval", &scenes(spec, a..a + e)).map_err(Failure::from_core)?;
    }
    println!(
        "wrote source + {} target splits ({} adapt / {} eval images each) to {}",
        d.targets.len(),
        d.target_adapt_images,
        d.target_eval_images,
        out.display()
    );
    Ok(())
}
