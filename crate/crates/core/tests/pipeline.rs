use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stainprompt::datasets::{default_domains, synthesize_sample, SyntheticConfig};
use stainprompt::diffusion::{label_vocabulary, DiffusionModel, UNet, UNetConfig};
use stainprompt::dual_path::{invert, oracle_recolor_adapter, OracleAdapter, PathKind};
use stainprompt::graph::Graph;
use stainprompt::schedule::{ddim_reverse_step_var, make_linear_schedule, ConditionLabel, EpsilonModel};
use stainprompt::sampler::{lambda_sweep, transfer, CachePolicy, SweepInput, TransferConfig};
use stainprompt::stain_prompt::{prompted_step, struct_loss, struct_loss_var, style_loss, style_loss_var, LossConfig};
use stainprompt::Tensor;

const SIZE: usize = 8;

fn tiny_model() -> DiffusionModel<f64> {
    let cfg = UNetConfig {
        image_channels: 3,
        patch: 2,
        channels: vec![4, 8],
        blocks_per_level: 1,
        time_features: 8,
        embed_dim: 8,
        groups: 2,
        num_labels: 3,
        zero_init: false,
    };
    let net = UNet::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    DiffusionModel::new(net, label_vocabulary(&[0, 1]), make_linear_schedule(40, 1e-4, 0.02).unwrap()).unwrap()
}

fn image(index: usize) -> Tensor<f64> {
    let cfg: SyntheticConfig = serde_json::from_value(serde_json::json!({ "n_samples": 4, "image_size": SIZE, "seed": 2 })).unwrap();
    synthesize_sample(&cfg, index).unwrap().renders[&0].cast()
}

fn adapter() -> OracleAdapter {
    let d = default_domains();
    oracle_recolor_adapter(d[0].clone(), d[1].clone()).unwrap()
}

fn config(lambda: f64) -> TransferConfig {
    TransferConfig { steps: 4, ist_init: 3, inner_learning_rate: 5e-2, ..TransferConfig::new(lambda, 0, 1, 5) }
}

#[test]
fn transfer_is_bitwise_deterministic() {
    let m = tiny_model();
    let x = image(0);
    let a = transfer("s00000", &x, &config(0.5), &m, &m.schedule, &adapter(), None).unwrap();
    let b = transfer("s00000", &x, &config(0.5), &m, &m.schedule, &adapter(), None).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.prompts.prompts(), b.prompts.prompts());
    assert_eq!(a.log, b.log);
    assert!(!a.prompts.is_zero());
}

#[test]
fn warm_cache_equals_cold_cache() {
    let m = tiny_model();
    let x = image(1);
    let dir = tempfile::tempdir().unwrap();
    let cold = transfer("s00001", &x, &config(0.5), &m, &m.schedule, &adapter(), Some(dir.path())).unwrap();
    let warm = transfer("s00001", &x, &config(0.5), &m, &m.schedule, &adapter(), Some(dir.path())).unwrap();
    let none = transfer("s00001", &x, &config(0.5), &m, &m.schedule, &adapter(), None).unwrap();
    let (c, w) = (cold.cache.unwrap(), warm.cache.unwrap());
    assert!(!c.structural_hit && !c.style_hit && !c.prompts_hit);
    assert!(w.structural_hit && w.style_hit && w.prompts_hit);
    assert_eq!(cold.output, warm.output);
    assert_eq!(cold.output, none.output);

    let off = TransferConfig { cache: CachePolicy::Off, ..config(0.5) };
    let r = transfer("s00001", &x, &off, &m, &m.schedule, &adapter(), Some(dir.path())).unwrap();
    assert!(r.cache.is_none());
    assert_eq!(r.output, cold.output);
}

#[test]
fn lambda_changes_stage_two_but_not_stage_one() {
    let m = tiny_model();
    let x = image(2);
    let dir = tempfile::tempdir().unwrap();
    let lo = transfer("s00002", &x, &config(0.0), &m, &m.schedule, &adapter(), Some(dir.path())).unwrap();
    let hi = transfer("s00002", &x, &config(1.0), &m, &m.schedule, &adapter(), Some(dir.path())).unwrap();
    assert_eq!(lo.structural_hash, hi.structural_hash);
    assert_eq!(lo.style_hash, hi.style_hash);
    assert_eq!(lo.pivot_hash, hi.pivot_hash);
    assert!(hi.cache.as_ref().unwrap().structural_hit);
    assert!(!hi.cache.as_ref().unwrap().prompts_hit);
    assert_ne!(lo.output, hi.output);
    // Each extreme logs one objective only: the inactive term never enters the total.
    assert!(lo.log.iter().all(|r| r.total == r.style_loss));
    assert!(hi.log.iter().all(|r| r.total == r.struct_loss));
}

#[test]
fn singleton_sweep_matches_a_standalone_transfer() {
    let m = tiny_model();
    let (x0, x1) = (image(0), image(3));
    let inputs = [SweepInput { sample_id: "s00000", image: &x0 }, SweepInput { sample_id: "s00003", image: &x1 }];
    let rows = lambda_sweep(&inputs, &[0.5], &config(0.9), &m, &m.schedule, &adapter(), None, |_, rs| {
        Ok(rs.iter().map(|r| r.output.clone()).collect::<Vec<_>>())
    })
    .unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, 0.5);
    for (inp, out) in inputs.iter().zip(&rows[0].1) {
        let alone = transfer(inp.sample_id, inp.image, &config(0.5), &m, &m.schedule, &adapter(), None).unwrap();
        assert_eq!(&alone.output, out);
    }
    assert!(lambda_sweep(&inputs, &[], &config(0.5), &m, &m.schedule, &adapter(), None, |_, _| Ok(())).is_err());
    assert!(lambda_sweep(&inputs, &[1.5], &config(0.5), &m, &m.schedule, &adapter(), None, |_, _| Ok(())).is_err());
}

#[test]
fn transfer_leaves_the_weights_untouched() {
    let m = tiny_model();
    let before = m.net.params().hash();
    transfer("s00000", &image(0), &config(0.3), &m, &m.schedule, &adapter(), None).unwrap();
    assert_eq!(m.net.params().hash(), before);
    assert_eq!(m.weights_hash(), before);
}

#[test]
fn batched_inversion_matches_per_image_inversion() {
    let m = tiny_model();
    let s = m.schedule.subsample(5).unwrap();
    let (a, b) = (image(0), image(1));
    let both = invert(&Tensor::stack(&[a.clone(), b.clone()]).unwrap(), &m, &s, ConditionLabel::Domain(0), PathKind::Structural).unwrap();
    for (i, x) in [a, b].iter().enumerate() {
        let one = invert(x, &m, &s, ConditionLabel::Domain(0), PathKind::Structural).unwrap();
        for t in 0..=5 {
            let got = both.at(t).narrow(i, 1).unwrap();
            let err = got.data().iter().zip(one.at(t).data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "item {i} t {t}: {err}");
        }
    }
}

/// Gradient of one inner-loop objective with respect to the prompt, taken on
/// the tape, against central differences of the same objective evaluated
/// through the plain tensor path.
#[test]
fn prompt_objective_gradient_matches_finite_differences() {
    let m = tiny_model();
    let s = m.schedule.subsample(4).unwrap();
    let x0 = image(0);
    let xs = invert(&x0, &m, &s, ConditionLabel::Domain(0), PathKind::Structural).unwrap();
    let y0 = adapter_output(&x0);
    let ys = invert(&y0, &m, &s, ConditionLabel::Null, PathKind::Style).unwrap();
    let t = 3;
    let target = ConditionLabel::Domain(1);
    let y_bar = xs.at(t).clone();
    let phi: Tensor<f64> = Tensor::new(y_bar.shape(), (0..y_bar.numel()).map(|i| 0.05 * ((i as f64) * 0.37).sin()).collect()).unwrap();
    for lambda in [0.0, 0.4, 1.0] {
        let cfg = LossConfig::with_lambda(lambda);
        let objective = |p: &Tensor<f64>| {
            let y = prompted_step(&y_bar, p, &m, &s, t, target).unwrap();
            lambda * struct_loss(xs.at(t - 1), &y, &cfg).unwrap() + (1.0 - lambda) * style_loss(ys.at(t - 1), &y).unwrap()
        };
        let g = Graph::new();
        let pv = g.param(phi.clone());
        let input = g.constant(y_bar.clone()).add(pv).unwrap();
        let eps = m.predict_var(&g, input, t, &s, target).unwrap();
        let y = ddim_reverse_step_var(input, eps, t, &s).unwrap();
        let sl = struct_loss_var(g.constant(xs.at(t - 1).clone()), y, &cfg).unwrap();
        let st = style_loss_var(g.constant(ys.at(t - 1).clone()), y).unwrap();
        let loss = sl.scale(lambda).add(st.scale(1.0 - lambda)).unwrap();
        assert!((loss.value().data()[0] - objective(&phi)).abs() < 1e-12);
        let grad = g.backward(loss).unwrap().take(pv);
        let h = 1e-5;
        for i in (0..phi.numel()).step_by(17) {
            let mut plus = phi.clone();
            plus.data_mut()[i] += h;
            let mut minus = phi.clone();
            minus.data_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad.data()[i];
            assert!((an - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "lambda {lambda} coord {i}: {an} vs {fd}");
        }
    }
}

fn adapter_output(x0: &Tensor<f64>) -> Tensor<f64> {
    stainprompt::dual_path::adapt(&adapter(), "s00000", x0).unwrap()
}

/// At `λ = 1` the style path never enters the objective, and at `λ = 0` the
/// structural path contributes only its pivot.
#[test]
fn lambda_extremes_ignore_the_inactive_path() {
    use stainprompt::dual_path::{IdentityAdapter, Trajectory};
    use stainprompt::sampler::prompted_sample;
    use stainprompt::stain_prompt::optimize_prompts;

    let m = tiny_model();
    let s = m.schedule.subsample(4).unwrap();
    let x0 = image(1);
    let target = ConditionLabel::Domain(1);
    let xs = invert(&x0, &m, &s, ConditionLabel::Domain(0), PathKind::Structural).unwrap();
    let ys = invert(&adapter_output(&x0), &m, &s, ConditionLabel::Null, PathKind::Style).unwrap();
    let ys_other = invert(&stainprompt::dual_path::adapt(&IdentityAdapter, "s00001", &x0).unwrap(), &m, &s, ConditionLabel::Null, PathKind::Style).unwrap();
    assert_ne!(ys.hash(), ys_other.hash());
    let mut scrambled: Vec<Tensor<f64>> = xs.latents().iter().map(|l| l.map(|v| -0.5 * v + 0.1)).collect();
    *scrambled.last_mut().unwrap() = xs.terminal().clone();
    let xs_other = Trajectory::from_latents(scrambled, xs.condition, xs.kind, &s, &m).unwrap();
    assert!(xs_other.verify(&m, &s).is_err());

    let run = |x: &Trajectory<f64>, y: &Trajectory<f64>, lambda: f64| {
        let cfg = LossConfig { ist_init: 3, inner_learning_rate: 5e-2, ..LossConfig::with_lambda(lambda) };
        let out = optimize_prompts(x, y, &m, &s, target, &cfg).unwrap();
        let sample = prompted_sample(x.terminal(), &out.prompts, &m, &s, target).unwrap();
        assert_eq!(&sample, out.output());
        sample
    };
    assert_eq!(run(&xs, &ys, 1.0), run(&xs, &ys_other, 1.0));
    assert_eq!(run(&xs, &ys, 0.0), run(&xs_other, &ys, 0.0));
    assert_ne!(run(&xs, &ys, 0.5), run(&xs, &ys_other, 0.5));
    assert_ne!(run(&xs, &ys, 0.5), run(&xs_other, &ys, 0.5));
}
