use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stainprompt::datasets::{default_domains, io};
use stainprompt::Tensor;

fn stainprompt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stainprompt"))
        .args(args)
        .current_dir(dir)
        .env_remove(stainprompt_cli::CACHE_ENV)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "stdout:\n{out}\nstderr:\n{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn two_domains() -> String {
    #[derive(serde::Serialize)]
    struct D {
        domains: Vec<stainprompt::datasets::StainDomain>,
    }
    toml::to_string(&D { domains: default_domains().into_iter().take(2).collect() }).unwrap()
}

fn gen_config(samples: usize, size: usize) -> String {
    format!("seed = 5\nout = \"corpus\"\nn_samples = {samples}\nimage_size = {size}\ntest_fraction = 0.5\n{}", two_domains())
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walk(dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn hash_line(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("corpus hash ")).expect("hash printed").to_string()
}

#[test]
fn gen_data_minimal_config_writes_every_render_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.toml", &gen_config(4, 16));
    let first = ok(&stainprompt(dir.path(), &["gen-data", "--config", "data.toml"]));
    let corpus = dir.path().join("corpus");
    let renders: Vec<_> = pngs(&corpus).into_iter().filter(|p| !p.starts_with(corpus.join("content"))).collect();
    assert_eq!(renders.len(), 8);
    assert!(corpus.join("manifest.json").is_file());
    assert!(corpus.join("run_manifest.json").is_file());
    let second = ok(&stainprompt(dir.path(), &["gen-data", "--config", "data.toml"]));
    assert_eq!(hash_line(&first), hash_line(&second));
    let reseeded = ok(&stainprompt(dir.path(), &["gen-data", "--config", "data.toml", "--seed", "6"]));
    assert_ne!(hash_line(&first), hash_line(&reseeded));
}

#[test]
fn missing_seed_is_a_machine_readable_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.toml", &gen_config(4, 16).replace("seed = 5\n", ""));
    let o = stainprompt(dir.path(), &["gen-data", "--config", "data.toml"]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).expect("json error record");
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("seed"), "{msg}");
    assert!(!dir.path().join("corpus").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.toml", &format!("{}test_fracton = 0.3\n", gen_config(4, 16)));
    let o = stainprompt(dir.path(), &["gen-data", "--config", "data.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("test_fracton"));
}

const TINY_MODEL: &str = "[model]\nchannels = [8, 16]\nembed_dim = 16\ntime_features = 8\ngroups = 4\n";

fn train_config(iterations: usize, resume: bool) -> String {
    format!(
        "seed = 2\ncorpus = \"corpus\"\nout = \"model\"\niterations = {iterations}\nbatch_size = 2\nlearning_rate = 1e-3\n\
         checkpoint_every = 2\nresume = {resume}\n{TINY_MODEL}"
    )
}

fn transfer_config(out: &str, extra: &str) -> String {
    format!(
        "seed = 4\ncorpus = \"corpus\"\ncheckpoint = \"model/model.ckpt\"\nout = \"{out}\"\n\
         [samples]\nlimit = 2\n\
         [transfer]\nlambda = 0.5\nsteps = 4\nist_init = 2\nsource = 0\ntarget = 1\n{extra}"
    )
}

fn read(p: &Path) -> Tensor<f32> {
    io::load_png(p).unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "data.toml", &gen_config(6, 16));
    ok(&stainprompt(d, &["gen-data", "--config", "data.toml"]));

    // Smoke training, refusal to clobber, then resuming to a later target.
    write(d, "train.toml", &train_config(2, false));
    ok(&stainprompt(d, &["train", "--config", "train.toml"]));
    assert!(!stainprompt(d, &["train", "--config", "train.toml"]).status.success());
    write(d, "train.toml", &train_config(3, true));
    let resumed = ok(&stainprompt(d, &["train", "--config", "train.toml"]));
    assert!(resumed.contains("resuming from iteration 2"), "{resumed}");
    let log = std::fs::read_to_string(d.join("model/loss.csv")).unwrap();
    let iters: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["1", "2", "3"]);
    assert!(d.join("model/loss.png").is_file());

    write(d, "transfer.toml", &transfer_config("transfer", ""));
    ok(&stainprompt(d, &["transfer", "--config", "transfer.toml"]));
    let outs = pngs(&d.join("transfer/images"));
    assert_eq!(outs.len(), 2);
    let metrics = std::fs::read_to_string(d.join("transfer/metrics.csv")).unwrap();
    assert!(metrics.starts_with("image_id,lambda,ssim,ms_ssim,psnr_db,frechet\n"));
    assert!(d.join("transfer/losses.csv").is_file() && d.join("transfer/loss_vs_inner_step.png").is_file());

    // A one-point sweep reproduces the transfer.
    write(d, "sweep.toml", &format!("{}[sweep]\nlambda = [0.5]\n", transfer_config("sweep", "")));
    ok(&stainprompt(d, &["sweep", "--config", "sweep.toml"]));
    let swept = pngs(&d.join("sweep/lambda_0.5/images"));
    assert_eq!(swept.len(), outs.len());
    for (a, b) in outs.iter().zip(&swept) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(read(a), read(b));
    }
    assert!(d.join("sweep/sweep.csv").is_file() && d.join("sweep/ssim_vs_lambda.png").is_file());

    // IST grid with the cache on, run twice: the second pass must hit the cache
    // and give the same images.
    write(d, "ist.toml", &format!("{}[sweep]\nist_init = [1, 2]\n", transfer_config("ist", "")));
    ok(&stainprompt(d, &["sweep", "--config", "ist.toml", "--cache-dir", "cache"]));
    let cold: Vec<Tensor<f32>> = pngs(&d.join("ist")).iter().filter(|p| p.to_string_lossy().contains("/images/")).map(|p| read(p)).collect();
    ok(&stainprompt(d, &["sweep", "--config", "ist.toml", "--cache-dir", "cache"]));
    let warm: Vec<Tensor<f32>> = pngs(&d.join("ist")).iter().filter(|p| p.to_string_lossy().contains("/images/")).map(|p| read(p)).collect();
    assert_eq!(cold.len(), 4);
    assert_eq!(cold, warm);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ist/ist_init_2/images").join(outs[0].with_extension("json").file_name().unwrap())).unwrap()).unwrap();
    assert_eq!(sidecar["cache"]["prompts_hit"], serde_json::Value::Bool(true));

    // Oracle references scored directly are exact.
    write(
        d,
        "eval.toml",
        "seed = 1\ncorpus = \"corpus\"\nout = \"eval\"\ntarget = 1\n[inputs]\nkind = \"adapter\"\nsource = 0\nadapter = { kind = \"oracle\" }\n",
    );
    let ev = ok(&stainprompt(d, &["eval", "--config", "eval.toml"]));
    assert!(ev.contains("ssim 1.0000"), "{ev}");
    let csv = std::fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    let corpus_row = csv.lines().find(|l| l.starts_with("corpus,")).unwrap();
    let cols: Vec<&str> = corpus_row.split(',').collect();
    assert_eq!(cols[2], "1");
    assert_eq!(cols[4], "inf");

    // Scoring the transfer run's images from disk matches its own table.
    write(d, "eval_dir.toml", "seed = 4\ncorpus = \"corpus\"\nout = \"eval_dir\"\ntarget = 1\n[inputs]\nkind = \"directory\"\npath = \"transfer/images\"\n");
    ok(&stainprompt(d, &["eval", "--config", "eval_dir.toml"]));
    let ssim_col = |p: &Path| {
        std::fs::read_to_string(p).unwrap().lines().filter(|l| l.starts_with('s')).map(|l| l.split(',').nth(2).unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(ssim_col(&d.join("eval_dir/metrics.csv")), ssim_col(&d.join("transfer/metrics.csv")));

    write(
        d,
        "errors.toml",
        "seed = 3\ncorpus = \"corpus\"\ncheckpoint = \"model/model.ckpt\"\nout = \"errors\"\nsource = 0\ntarget = 1\n\
         steps = [0, 2]\nist_init = 1\n[samples]\nlimit = 1\n",
    );
    ok(&stainprompt(d, &["error-study", "--config", "errors.toml"]));
    let rows = std::fs::read_to_string(d.join("errors/error_study.csv")).unwrap();
    let zero: Vec<&str> = rows.lines().filter(|l| l.split(',').nth(3) == Some("0")).collect();
    assert_eq!(zero.len(), 8, "four conditions, with and without prompts");
    for l in zero {
        let c: Vec<&str> = l.split(',').collect();
        assert_eq!((c[6], c[7]), ("0", "1"), "{l}");
    }
    assert!(d.join("errors/comparison.csv").is_file() && d.join("errors/rmse_vs_steps.png").is_file());

    write(d, "report.toml", "out = \"report\"\nruns = [\"model\", \"transfer\", \"sweep\", \"errors\"]\n");
    ok(&stainprompt(d, &["report", "--config", "report.toml"]));
    let md = std::fs::read_to_string(d.join("report/report.md")).unwrap();
    assert!(md.contains("## sweep") && md.contains("sweep.csv"));

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("transfer/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "transfer");
    assert!(m["checkpoint_hash"].is_string());
    assert!(m["outputs"].as_array().unwrap().len() >= 6);
}

#[test]
fn transfer_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "data.toml", &gen_config(4, 16));
    ok(&stainprompt(d, &["gen-data", "--config", "data.toml"]));
    write(d, "train.toml", &train_config(1, false));
    ok(&stainprompt(d, &["train", "--config", "train.toml"]));
    for out in ["a", "b"] {
        write(d, "t.toml", &transfer_config(out, "adapter = { kind = \"noisy_oracle\", noise_level = 0.1 }\n"));
        ok(&stainprompt(d, &["transfer", "--config", "t.toml"]));
    }
    let (a, b) = (pngs(&d.join("a")), pngs(&d.join("b")));
    assert!(!a.is_empty());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let losses = |p: &str| std::fs::read_to_string(d.join(p).join("losses.csv")).unwrap();
    assert_eq!(losses("a"), losses("b"));
}
