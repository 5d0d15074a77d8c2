use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::hash::write_atomic;

use super::{create_dir, Globals};
use crate::config::load;
use crate::manifest::{read_manifest, Recorder};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Unused by the report itself; accepted so `--seed` can be passed uniformly.
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Output directories of finished runs.
    pub runs: Vec<PathBuf>,
}

/// Tables a run may have produced, in the order they are reported.
const TABLES: [&str; 4] = ["comparison.csv", "sweep.csv", "error_summary.csv", "metrics.csv"];

fn markdown_table(csv: &str, only_corpus_rows: bool) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else { return String::new() };
    let cols = header.split(',').count();
    let mut s = format!("| {} |\n|{}\n", header.replace(',', " | "), " --- |".repeat(cols));
    for l in lines.filter(|l| !only_corpus_rows || l.starts_with("corpus,")) {
        writeln!(s, "| {} |", l.replace(',', " | ")).expect("string write");
    }
    s
}

fn plots(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|r| r.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "png")).collect())
        .unwrap_or_default();
    v.sort();
    v
}

pub fn run(g: &Globals) -> Result<()> {
    let cfg = load::<ReportConfig>(g.config, g.seed)?;
    let c = &cfg.config;
    let out = cfg.path(&c.out);
    create_dir(&out)?;
    let mut rec = Recorder::new("report", g.config, &cfg.table, c.seed.unwrap_or(0), g.workers)?;
    let mut md = String::from("# Run report\n");
    let mut manifests = Vec::new();
    for run in &c.runs {
        let dir = cfg.path(run);
        let m = read_manifest(&dir).with_context(|| format!("run {}", dir.display()))?;
        rec.input_file(&format!("manifest:{}", dir.display()), &dir.join(crate::manifest::MANIFEST_NAME))?;
        writeln!(md, "\n## {} (`{}`)\n", m.command, dir.display()).expect("string write");
        writeln!(md, "- config: `{}`", m.config_path.display()).expect("string write");
        writeln!(md, "- seed: {}", m.seed).expect("string write");
        if let Some(h) = &m.checkpoint_hash {
            writeln!(md, "- checkpoint weights: `{h}`").expect("string write");
        }
        writeln!(md, "- outputs: {}", m.outputs.len()).expect("string write");
        writeln!(md, "- wall clock: {:.1} s", m.timings_s.get("total").copied().unwrap_or(0.0)).expect("string write");
        for t in TABLES {
            let p = dir.join(t);
            if let Ok(text) = std::fs::read_to_string(&p) {
                writeln!(md, "\n### {t}\n\n{}", markdown_table(&text, t == "metrics.csv")).expect("string write");
            }
        }
        for p in plots(&dir) {
            writeln!(md, "\n![{}]({})", p.file_name().expect("file").to_string_lossy(), p.display()).expect("string write");
        }
        manifests.push(m);
    }
    let md_path = out.join("report.md");
    write_atomic(&md_path, md.as_bytes())?;
    rec.output(&md_path);
    let json_path = out.join("report.json");
    write_atomic(&json_path, &serde_json::to_vec_pretty(&manifests)?)?;
    rec.output(&json_path);
    rec.finish(&out)?;
    println!("report for {} runs in {}", manifests.len(), md_path.display());
    Ok(())
}
