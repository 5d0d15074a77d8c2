use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::hash::write_atomic;
use stainprompt::metrics::{spearman, write_metrics_csv, MetricBundle};
use stainprompt::sampler::TransferConfig;

use super::transfer::{open_session, print_bundle, reference_set, transfer_all, write_set};
use super::Globals;
use crate::config::parse;
use crate::plot::{line_plot, Series};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambda: Option<Vec<f64>>,
    pub ist_init: Option<Vec<usize>>,
}

enum Grid {
    Lambda(Vec<f64>),
    Ist(Vec<usize>),
}

impl Grid {
    fn name(&self) -> &'static str {
        match self {
            Grid::Lambda(_) => "lambda",
            Grid::Ist(_) => "ist_init",
        }
    }

    fn points(&self, base: &TransferConfig) -> Vec<(f64, TransferConfig)> {
        match self {
            Grid::Lambda(v) => v.iter().map(|&l| (l, TransferConfig { lambda: l, ..base.clone() })).collect(),
            Grid::Ist(v) => v.iter().map(|&i| (i as f64, TransferConfig { ist_init: i, ..base.clone() })).collect(),
        }
    }
}

fn grid(sec: &toml::Table) -> Result<Grid> {
    let s: SweepSection = parse(sec).context("invalid [sweep] section")?;
    match (s.lambda, s.ist_init) {
        (Some(l), None) if !l.is_empty() => Ok(Grid::Lambda(l)),
        (None, Some(i)) if !i.is_empty() => Ok(Grid::Ist(i)),
        _ => bail!("[sweep] needs exactly one non-empty grid: `lambda` or `ist_init`"),
    }
}

pub fn run(g: &Globals) -> Result<()> {
    let mut s = open_session(g, "sweep")?;
    let grid = grid(s.cfg.config.sweep.as_ref().expect("checked by open_session"))?;
    let base = s.transfer.clone();
    let reference = if s.featurizer.is_some() { reference_set(&s.corpus, base.target, &s.cfg.config.samples.split)? } else { Vec::new() };
    let mut rows: Vec<(f64, Option<MetricBundle>)> = Vec::new();
    for (value, cfg) in grid.points(&base) {
        cfg.validate()?;
        let dir = s.out.join(format!("{}_{value}", grid.name()));
        let mut results = transfer_all(&s, &cfg, g.workers, g.cache_dir.as_deref())?;
        let b = write_set(&mut s, &dir, &mut results, Some(cfg.lambda), &reference)?;
        if let Some(b) = &b {
            print_bundle(&format!("{} {value}", grid.name()), b);
        }
        rows.push((value, b));
    }

    let out = s.out.clone();
    let bundles: Vec<MetricBundle> = rows.iter().filter_map(|r| r.1.clone()).collect();
    if bundles.len() == rows.len() {
        let p = out.join("metrics.csv");
        write_metrics_csv(&p, &bundles)?;
        s.rec.output(p);

        let mut table = String::from("parameter,value,count,ssim_mean,ssim_se,ms_ssim_mean,ms_ssim_se,psnr_db_mean,psnr_db_se,frechet\n");
        for (v, b) in rows.iter().map(|(v, b)| (v, b.as_ref().expect("all present"))) {
            writeln!(
                table,
                "{},{v},{},{},{},{},{},{},{},{}",
                grid.name(),
                b.count,
                b.ssim.mean,
                b.ssim.se,
                b.ms_ssim.mean,
                b.ms_ssim.se,
                b.psnr_db.mean,
                b.psnr_db.se,
                b.frechet.map(|f| f.to_string()).unwrap_or_default()
            )
            .expect("string write");
        }
        let p = out.join("sweep.csv");
        write_atomic(&p, table.as_bytes())?;
        s.rec.output(p);

        let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let series = |f: fn(&MetricBundle) -> f64| xs.iter().copied().zip(bundles.iter().map(f)).collect::<Vec<_>>();
        let p = out.join(format!("ssim_vs_{}.png", grid.name()));
        line_plot(
            &p,
            &format!("Similarity to ground truth vs {}", grid.name()),
            grid.name(),
            "corpus mean",
            &[Series::new("SSIM", series(|b| b.ssim.mean)), Series::new("MS-SSIM", series(|b| b.ms_ssim.mean))],
        )?;
        s.rec.output(p);
        if bundles.iter().all(|b| b.frechet.is_some()) {
            let p = out.join(format!("frechet_vs_{}.png", grid.name()));
            let pts = series(|b| b.frechet.expect("checked"));
            line_plot(&p, &format!("Fréchet feature distance vs {}", grid.name()), grid.name(), "distance", &[Series::new("Fréchet", pts.clone())])?;
            s.rec.output(p);
            if xs.len() >= 2 {
                let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
                println!("spearman({}, frechet) = {:.3}", grid.name(), spearman(&xs, &y)?);
            }
        }
        if xs.len() >= 2 {
            let y: Vec<f64> = bundles.iter().map(|b| b.ssim.mean).collect();
            println!("spearman({}, ssim) = {:.3}", grid.name(), spearman(&xs, &y)?);
            if let Grid::Ist(_) = grid {
                let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                println!("ssim spread across ist_init = {:.4}", hi - lo);
            }
        }
    } else {
        println!("no paired ground truth; metrics skipped");
    }
    s.rec.finish(&out)?;
    Ok(())
}
