#![allow(dead_code)]

pub mod oracle;

use hdvnet::density::{calibrate_states, density_profile, DensityOptions, StateThresholds};
use hdvnet::eval::{generate_scene, mine_spec};
use hdvnet::model::input::REL_DIM;
use hdvnet::model::{build_input, HdvConfig, LevelInput, NetInput, Scene};
use hdvnet::nn::{Graph, Mat, Var};
use hdvnet::spatial::SpatialIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in ±`scale`, kept at least 1e-3 away from zero so leaky
/// ReLU kinks stay out of finite-difference reach.
pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.random_range(-scale..scale);
        if v.abs() < 1e-3 {
            v.signum() * 1e-3 + v
        } else {
            v
        }
    })
}

/// `Σ y ⊙ r` as a 1×1 node.
pub fn weighted_sum(g: &mut Graph, y: Var, r: &Mat) -> Var {
    let (n, m) = g.value(y).dim();
    let rv = g.input(r.clone());
    let p = g.mul(y, rv).unwrap();
    let left = g.input(Mat::ones((1, n)));
    let right = g.input(Mat::ones((m, 1)));
    let s = g.matmul(left, p).unwrap();
    g.matmul(s, right).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between backward and central differences over
/// every entry of every input. `f` builds a scalar from leaves holding
/// `inputs`.
pub fn grad_check<F>(inputs: &[Mat], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.value(out)[[0, 0]]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, m) in inputs.iter().enumerate() {
        let zero = Mat::zeros(m.dim());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zero).clone();
        for idx in ndarray::indices(m.dim()) {
            let mut plus = inputs.to_vec();
            plus[i][idx] += h;
            let mut minus = inputs.to_vec();
            minus[i][idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[idx], numeric));
        }
    }
    worst
}

/// Four small ray-cast mine scenes with thresholds calibrated on them.
pub struct TinyData {
    pub cfg: HdvConfig,
    pub thresholds: StateThresholds,
    pub scenes: Vec<Scene>,
}

pub fn calibrate(clouds: &[hdvnet::pcio::PointCloud], cfg: &HdvConfig) -> StateThresholds {
    let opts = DensityOptions {
        jitter_duplicates: true,
        ..Default::default()
    };
    let profiles: Vec<_> = clouds.iter().map(|c| density_profile(c, &opts).unwrap()).collect();
    let fr: Vec<f64> = cfg.counts.iter().map(|&c| c as f64 / cfg.counts[0] as f64).collect();
    calibrate_states(&profiles, &fr.try_into().unwrap()).unwrap()
}

pub fn tiny_data(n1: usize, scenes: u64, rows: u32, cols: u32) -> TinyData {
    let cfg = HdvConfig::tiny(3, n1);
    let clouds: Vec<_> = (0..scenes)
        .map(|v| generate_scene(&mine_spec(v, rows, cols, n1), v).unwrap())
        .collect();
    let thresholds = calibrate(&clouds, &cfg);
    let scenes = clouds
        .into_iter()
        .map(|c| Scene::prepare(c, &thresholds).unwrap())
        .collect();
    TinyData {
        cfg,
        thresholds,
        scenes,
    }
}

/// One sphere of `scene` centred on point `centre`.
pub fn sphere_input(cfg: &HdvConfig, scene: &Scene, centre: usize, seed: u64) -> NetInput {
    let index = SpatialIndex::build(&scene.cloud.positions());
    let members = hdvnet::model::input::sphere_members(&index, centre, cfg.counts[0]).unwrap();
    build_input(cfg, scene, &members, seed).unwrap()
}

/// A sphere whose level-1 states include at least three distinct values,
/// so masks and existence weights are not trivial.
pub fn varied_sphere(cfg: &HdvConfig, scene: &Scene, seed: u64) -> NetInput {
    let mut r = rng(seed);
    let mut best: Option<(usize, NetInput)> = None;
    for _ in 0..20 {
        let c = r.random_range(0..scene.n());
        let input = sphere_input(cfg, scene, c, seed);
        let mut s = input.levels[0].states.clone();
        s.sort_unstable();
        s.dedup();
        if best.as_ref().is_none_or(|(b, _)| s.len() > *b) {
            let done = s.len() >= 3;
            best = Some((s.len(), input));
            if done {
                break;
            }
        }
    }
    best.unwrap().1
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// One random instance of every differentiable graph op, each reduced to a
/// scalar, with the leaf values it runs on.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Mat>, Builder)> {
    let mut r = rng(seed);
    let n = r.random_range(1..5);
    let m = r.random_range(1..5);
    let p = r.random_range(1..5);
    let mut cases: Vec<(&'static str, Vec<Mat>, Builder)> = Vec::new();
    let w_nm = random_mat(&mut r, n, m, 1.0);
    let w_np = random_mat(&mut r, n, p, 1.0);
    let reduce = move |w: Mat| move |g: &mut Graph, y: Var| weighted_sum(g, y, &w);

    let red = reduce(w_np.clone());
    cases.push((
        "matmul",
        vec![random_mat(&mut r, n, m, 1.0), random_mat(&mut r, m, p, 1.0)],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            red(g, y)
        }),
    ));
    let red = reduce(w_nm.clone());
    cases.push((
        "add_row",
        vec![random_mat(&mut r, n, m, 1.0), random_mat(&mut r, 1, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.add_row(v[0], v[1]).unwrap();
            red(g, y)
        }),
    ));
    let red = reduce(w_nm.clone());
    cases.push((
        "add",
        vec![random_mat(&mut r, n, m, 1.0), random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            red(g, y)
        }),
    ));
    let red = reduce(w_nm.clone());
    cases.push((
        "mul",
        vec![random_mat(&mut r, n, m, 1.0), random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            red(g, y)
        }),
    ));
    let s: f64 = r.random_range(-3.0..3.0);
    let red = reduce(w_nm.clone());
    cases.push((
        "scale",
        vec![random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.scale(v[0], s);
            red(g, y)
        }),
    ));
    let red = reduce(w_nm.clone());
    cases.push((
        "leaky_relu",
        vec![random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            red(g, y)
        }),
    ));
    let red = reduce(w_nm.clone());
    cases.push((
        "softplus",
        vec![random_mat(&mut r, n, m, 3.0)],
        Box::new(move |g, v| {
            let y = g.softplus(v[0]);
            red(g, y)
        }),
    ));
    let mw = m + 1;
    let red = reduce(random_mat(&mut r, n, mw, 1.0));
    cases.push((
        "layer_norm",
        vec![
            random_mat(&mut r, n, mw, 1.0),
            random_mat(&mut r, 1, mw, 1.0),
            random_mat(&mut r, 1, mw, 1.0),
        ],
        Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
            red(g, y)
        }),
    ));
    let cols: Vec<usize> = (0..p + 2).map(|_| r.random_range(0..m)).collect();
    let red = reduce(random_mat(&mut r, n, cols.len(), 1.0));
    cases.push((
        "select_cols",
        vec![random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.select_cols(v[0], cols.clone()).unwrap();
            red(g, y)
        }),
    ));
    let a = r.random_range(0..m);
    let b = r.random_range(a + 1..=m);
    let red = reduce(random_mat(&mut r, n, b - a, 1.0));
    cases.push((
        "slice_cols",
        vec![random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.slice_cols(v[0], a, b).unwrap();
            red(g, y)
        }),
    ));
    let red = reduce(random_mat(&mut r, n, m + p, 1.0));
    cases.push((
        "concat_cols",
        vec![random_mat(&mut r, n, m, 1.0), random_mat(&mut r, n, p, 1.0)],
        Box::new(move |g, v| {
            let y = g.concat_cols(&[v[0], v[1]]).unwrap();
            red(g, y)
        }),
    ));
    let rows: Vec<usize> = (0..n + 2).map(|_| r.random_range(0..n)).collect();
    let red = reduce(random_mat(&mut r, rows.len(), m, 1.0));
    cases.push((
        "gather_rows",
        vec![random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.gather_rows(v[0], rows.clone()).unwrap();
            red(g, y)
        }),
    ));
    let k = r.random_range(1..4);
    let weights: Vec<f64> = (0..n * k)
        .map(|_| if r.random_bool(0.3) { 0.0 } else { r.random_range(-1.0..1.0) })
        .collect();
    let red = reduce(w_nm.clone());
    cases.push((
        "segment_sum",
        vec![random_mat(&mut r, n * k, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.segment_sum(v[0], weights.clone(), k).unwrap();
            red(g, y)
        }),
    ));
    let red = reduce(w_nm.clone());
    cases.push((
        "group_mean",
        vec![random_mat(&mut r, n * k, m, 1.0)],
        Box::new(move |g, v| {
            let y = g.group_mean(v[0], k).unwrap();
            red(g, y)
        }),
    ));
    let split = r.random_range(1..=m);
    let groups = if split < m { vec![(0, split), (split, m - split)] } else { vec![(0, m)] };
    let red = reduce(w_nm.clone());
    cases.push((
        "group_softmax",
        vec![random_mat(&mut r, n, m, 2.0)],
        Box::new(move |g, v| {
            let y = g.group_softmax(v[0], groups.clone()).unwrap();
            red(g, y)
        }),
    ));
    let kc = m + 1;
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..kc)).collect();
    let coef: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    cases.push((
        "softmax_xent",
        vec![random_mat(&mut r, n, kc, 2.0)],
        Box::new(move |g, v| g.softmax_xent(v[0], labels.clone(), coef.clone()).unwrap()),
    ));
    let c0: f64 = r.random_range(-2.0..2.0);
    let c1: f64 = r.random_range(-2.0..2.0);
    let r0 = random_mat(&mut r, n, m, 1.0);
    let r1 = random_mat(&mut r, n, m, 1.0);
    cases.push((
        "combine",
        vec![random_mat(&mut r, n, m, 1.0), random_mat(&mut r, n, m, 1.0)],
        Box::new(move |g, v| {
            let a = weighted_sum(g, v[0], &r0);
            let b = weighted_sum(g, v[1], &r1);
            g.combine(&[(a, c0), (b, c1)]).unwrap()
        }),
    ));
    cases
}

/// A level with random neighbour table, positions and states.
pub fn random_level(rng: &mut ChaCha8Rng, n: usize, k: usize, raw_dim: usize) -> LevelInput {
    let neighbors: Vec<usize> = (0..n * k).map(|_| rng.random_range(0..n)).collect();
    LevelInput {
        n,
        k,
        rel: random_mat(rng, n * k, REL_DIM, 1.0),
        neighbors,
        raw: random_mat(rng, n, raw_dim, 1.0),
        states: (0..n).map(|_| rng.random_range(0..6)).collect(),
        labels: None,
        down: Vec::new(),
        up_map: Vec::new(),
    }
}

/// Largest finite-difference Jacobian entry from an input subsection `j` to
/// any output subsection `d > j`, over every point and feature. Only the
/// columns in `probe` (input layout) are perturbed.
pub fn block_leak<F>(x: &Mat, layout_in: &hdvnet::nn::Layout, layout_out: &hdvnet::nn::Layout, f: F) -> f64
where
    F: Fn(&Mat) -> Mat,
{
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for j in 0..layout_in.count() {
        if j + 1 >= layout_out.count() {
            continue;
        }
        for c in layout_in.range(j) {
            for i in 0..x.nrows() {
                let mut plus = x.clone();
                plus[[i, c]] += h;
                let mut minus = x.clone();
                minus[[i, c]] -= h;
                let (yp, ym) = (f(&plus), f(&minus));
                for d in j + 1..layout_out.count() {
                    for o in layout_out.range(d) {
                        for r in 0..yp.nrows() {
                            worst = worst.max(((yp[[r, o]] - ym[[r, o]]) / (2.0 * h)).abs());
                        }
                    }
                }
            }
        }
    }
    worst
}

pub fn random_layout(rng: &mut ChaCha8Rng, count: usize, max_width: usize) -> hdvnet::nn::Layout {
    hdvnet::nn::Layout::new((0..count).map(|_| rng.random_range(1..=max_width)).collect()).unwrap()
}

/// Backward against central differences for the training loss of a whole
/// network on one sphere, over `samples` random parameter entries drawn from
/// the tensors that receive a gradient.
pub fn model_grad_check(
    net: &hdvnet::model::HdvNet,
    store: &hdvnet::nn::ParamStore,
    input: &NetInput,
    stage: hdvnet::train::Stage,
    samples: usize,
    seed: u64,
) -> f64 {
    let k = net.cfg.class_count;
    let weights: Vec<f64> = (0..k).map(|c| 0.5 + c as f64 / k as f64).collect();
    let loss = |s: &hdvnet::nn::ParamStore| -> f64 {
        let mut g = Graph::new();
        let (l, _) = hdvnet::train::sphere_loss(net, s, &mut g, input, stage, &weights).unwrap();
        g.value(l)[[0, 0]]
    };
    let mut g = Graph::new();
    let (l, _) = hdvnet::train::sphere_loss(net, store, &mut g, input, stage, &weights).unwrap();
    let grads = g.backward(l).unwrap();
    let touched: Vec<(hdvnet::nn::ParamId, Mat)> =
        grads.param_grads().into_iter().map(|(id, m)| (id, m.clone())).collect();
    assert!(!touched.is_empty());
    let mut r = rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (id, grad) = &touched[r.random_range(0..touched.len())];
        let (rows, cols) = grad.dim();
        let idx = (r.random_range(0..rows), r.random_range(0..cols));
        let mut plus = store.clone();
        plus.value_mut(*id)[idx] += h;
        let mut minus = store.clone();
        minus.value_mut(*id)[idx] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(grad[idx], numeric));
    }
    worst
}

/// Two classes told apart by colour alone: a dark floor (0) and a bright
/// wall (1) in front of the scanner.
pub fn two_class_spec(rows: u32, cols: u32) -> hdvnet::eval::SceneSpec {
    use hdvnet::eval::{Primitive, SceneSpec, Shape};
    let quad = |origin, u, v, label, albedo| Primitive {
        shape: Shape::Parallelogram { origin, u, v },
        label,
        albedo,
    };
    SceneSpec {
        scanner: [0.0, 0.0, 1.5],
        primitives: vec![
            quad([-2.0, -6.0, 0.0], [14.0, 0.0, 0.0], [0.0, 12.0, 0.0], 0, [0.1, 0.1, 0.1]),
            quad([6.0, -6.0, 0.0], [0.0, 12.0, 0.0], [0.0, 0.0, 4.0], 1, [0.9, 0.9, 0.9]),
        ],
        rows,
        cols,
        elevation_deg: [-60.0, 30.0],
        azimuth_deg: [-60.0, 60.0],
        max_range: 50.0,
        noise_sigma: 0.002,
        colour_noise: 0.03,
        min_points: 100,
        class_count: 2,
    }
}

pub fn two_class_data(n1: usize, scenes: u64) -> TinyData {
    let cfg = HdvConfig::tiny(2, n1);
    let clouds: Vec<_> = (0..scenes)
        .map(|s| generate_scene(&two_class_spec(40, 80), s).unwrap())
        .collect();
    let thresholds = calibrate(&clouds, &cfg);
    let scenes = clouds
        .into_iter()
        .map(|c| Scene::prepare(c, &thresholds).unwrap())
        .collect();
    TinyData {
        cfg,
        thresholds,
        scenes,
    }
}

pub fn read_log(log: &[u8]) -> Vec<hdvnet::train::StepLog> {
    String::from_utf8(log.to_vec())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
