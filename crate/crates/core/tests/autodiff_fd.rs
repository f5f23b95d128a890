use mrcl_core::encoders::{init_params, prepare_scene, ModelSpec};
use mrcl_core::graph::GraphConfig;
use mrcl_core::scene::{generate_scene, SceneGenConfig};
use mrcl_core::seed::stream_rng;
use mrcl_core::tensor::{ParamStore, Tape, Tensor, Var, PAD};
use mrcl_core::training::{forward_losses, sample_batch_paths, TrainConfig};
use mrcl_core::Result;
use proptest::prelude::*;
use rand::Rng;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn random(seed: u64, shape: &[usize], kink_free: bool) -> Tensor<f64> {
    let mut rng = stream_rng(seed, "fd", &[shape.iter().product::<usize>() as u64]);
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if kink_free && v.abs() < 0.05 {
                v.signum() * 0.05 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows with norm below 0.5 get a unit first entry; normalization is
/// singular at the origin and central differences lose accuracy near it.
fn away_from_origin(mut t: Tensor<f64>) -> Tensor<f64> {
    let n = t.shape()[1];
    for row in t.data_mut().chunks_mut(n) {
        if row.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.5 {
            row[0] = 1.0;
        }
    }
    t
}

/// Reduces any output to a scalar through a fixed random projection.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random(99, &shape, false))?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn loss_value(inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let l = build(&mut tape, &vars).unwrap();
    tape.value(l).item().unwrap()
}

/// Max-norm relative error between the tape gradient and central differences
/// over every input element.
fn fd_error(inputs: &[Tensor<f64>], build: &Build<'_>, h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let l = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(l).unwrap();
    let (mut diff, mut scale) = (0.0f64, 1e-8f64);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            let numeric = (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * h);
            diff = diff.max((analytic[idx] - numeric).abs());
            scale = scale.max(analytic[idx].abs()).max(numeric.abs());
        }
    }
    diff / scale
}

fn check(inputs: Vec<Tensor<f64>>, build: &Build<'_>) -> std::result::Result<(), TestCaseError> {
    let err = fd_error(&inputs, build, 1e-3);
    prop_assert!(err < 1e-4, "relative error {err}");
    Ok(())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn matmul((m, k, n, s) in dims()) {
        check(vec![random(s, &[m, k], false), random(s + 1, &[k, n], false)], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        })?;
    }

    #[test]
    fn elementwise((m, n, _, s) in dims()) {
        let ins = vec![random(s, &[m, n], false), random(s + 1, &[m, n], false)];
        check(ins.clone(), &|t, v| { let y = t.add(v[0], v[1])?; project(t, y) })?;
        check(ins.clone(), &|t, v| { let y = t.sub(v[0], v[1])?; project(t, y) })?;
        check(ins.clone(), &|t, v| { let y = t.mul(v[0], v[1])?; project(t, y) })?;
        check(ins[..1].to_vec(), &|t, v| { let y = t.scale(v[0], -1.7)?; project(t, y) })?;
    }

    #[test]
    fn add_row((m, n, _, s) in dims()) {
        check(vec![random(s, &[m, n], false), random(s + 1, &[1, n], false)], &|t, v| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y)
        })?;
    }

    #[test]
    fn relu((m, n, _, s) in dims()) {
        check(vec![random(s, &[m, n], true)], &|t, v| { let y = t.relu(v[0])?; project(t, y) })?;
    }

    #[test]
    fn reductions((m, n, _, s) in dims()) {
        let ins = vec![random(s, &[m, n], false)];
        check(ins.clone(), &|t, v| { let y = t.mul(v[0], v[0])?; t.sum(y) })?;
        check(ins.clone(), &|t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) })?;
        for axis in 0..2 {
            check(ins.clone(), &|t, v| { let y = t.sum_axis(v[0], axis)?; project(t, y) })?;
            check(ins.clone(), &|t, v| { let y = t.mean_axis(v[0], axis)?; project(t, y) })?;
        }
    }

    #[test]
    fn concat((m, n, k, s) in dims()) {
        check(vec![random(s, &[m, n], false), random(s + 1, &[m, k], false)], &|t, v| {
            let y = t.concat_cols(&[v[0], v[1], v[0]])?;
            project(t, y)
        })?;
        check(vec![random(s, &[m, n], false), random(s + 1, &[k, n], false)], &|t, v| {
            let y = t.concat_rows(&[v[1], v[0]])?;
            project(t, y)
        })?;
    }

    #[test]
    fn gather_and_scatter((m, n, _, s) in dims(), picks in prop::collection::vec(0usize..64, 1..8)) {
        let idx: Vec<usize> = picks.iter().map(|p| p % m).collect();
        check(vec![random(s, &[m, n], false)], &|t, v| {
            let y = t.gather_rows(v[0], &idx)?;
            project(t, y)
        })?;
        let target: Vec<usize> = (0..m).map(|r| idx[r % idx.len()]).collect();
        check(vec![random(s, &[m, n], false)], &|t, v| {
            let y = t.index_add_rows(v[0], &target, m)?;
            project(t, y)
        })?;
        let len = m * n;
        let flat: Vec<usize> = (0..6).map(|i| if i % 3 == 2 { PAD } else { picks[i % picks.len()] % len }).collect();
        check(vec![random(s, &[m, n], false)], &|t, v| {
            let y = t.gather_flat(v[0], &flat, [2, 3])?;
            project(t, y)
        })?;
    }

    #[test]
    fn reshape_transpose((m, n, _, s) in dims()) {
        check(vec![random(s, &[m, n], false)], &|t, v| {
            let y = t.reshape(v[0], [n, m])?;
            let z = t.transpose(y)?;
            project(t, z)
        })?;
    }

    #[test]
    fn normalization((m, n, k, s) in dims()) {
        let n = n + 2;
        check(vec![away_from_origin(random(s, &[m, n], false))], &|t, v| {
            let y = t.l2_normalize(v[0], 1e-8)?;
            project(t, y)
        })?;
        let pair = vec![away_from_origin(random(s, &[m, n], false)), away_from_origin(random(s + 1, &[k, n], false))];
        check(pair, &|t, v| {
            let y = t.cosine_similarity(v[0], v[1], 1e-8)?;
            project(t, y)
        })?;
    }

    #[test]
    fn logsumexp((m, n, _, s) in dims()) {
        check(vec![random(s, &[m, n + 1], false)], &|t, v| {
            let y = t.scale(v[0], 3.0)?;
            let z = t.logsumexp_rows(y)?;
            project(t, z)
        })?;
    }
}

#[test]
fn composite_loss_matches_central_differences() {
    let scene_cfg = SceneGenConfig { objects_min: 4, objects_max: 4, ..SceneGenConfig::default() };
    let spec = ModelSpec {
        encoder: Default::default(),
        force: Default::default(),
        n_labels: scene_cfg.n_labels,
        n_attributes: scene_cfg.n_attributes,
    };
    let cfg = TrainConfig::default();
    let prepared: Vec<_> = (0..2)
        .map(|i| {
            let s = generate_scene(31 + i, &format!("fd{i}"), &scene_cfg).unwrap();
            prepare_scene(&s, &spec, &GraphConfig::default(), &cfg.k_set).unwrap()
        })
        .collect();
    let refs: Vec<_> = prepared.iter().collect();
    let paths = sample_batch_paths(&refs, &cfg, &[1, 2]).unwrap();
    let mut params: ParamStore<f64> = init_params(&spec, 5).unwrap().cast();
    // Zero biases put empty crop regions exactly on the relu kink.
    let mut rng = stream_rng(4, "fd-bias", &[]);
    let bias_ids: Vec<usize> = params.names().iter().enumerate().filter(|(_, n)| n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2")).map(|(i, _)| i).collect();
    for i in bias_ids {
        for v in params.tensors_mut()[i].data_mut() {
            *v = rng.gen_range(0.05..0.3) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }

    let total = |store: &ParamStore<f64>| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let out = forward_losses(&mut tape, &bound, &spec, &cfg, &refs, &paths).unwrap();
        let value = tape.value(out.total).item().unwrap();
        let grads = tape.backward(out.total).unwrap();
        let g = bound
            .vars()
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (value, Some(g))
    };
    let (_, grads) = total(&params);
    let grads = grads.unwrap();

    rng = stream_rng(3, "fd-composite", &[]);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 24 {
        let t = rng.gen_range(0..params.len());
        let e = rng.gen_range(0..params.tensors()[t].len());
        let mut plus = params.clone();
        plus.tensors_mut()[t].data_mut()[e] += h;
        let mut minus = params.clone();
        minus.tensors_mut()[t].data_mut()[e] -= h;
        let numeric = (total(&plus).0 - total(&minus).0) / (2.0 * h);
        let analytic = grads[t][e];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-3, "{}[{e}]: analytic {analytic} numeric {numeric}", params.names()[t]);
        checked += 1;
    }
}
