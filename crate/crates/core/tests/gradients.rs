//! Finite-difference checks of every hand-written backward pass.

use fedins_core::backbone::{BackboneConfig, FrozenBackbone, HeadParams, InsertionScheme, QueryVector};
use fedins_core::nn::{
    finite_diff_check, gelu, gelu_backward, layer_norm_backward, layer_norm_forward, linear, linear_backward,
    softmax_xent, GradCheckReport, Matrix, ParamBlock,
};
use fedins_core::pool::{key_match_loss, pool_batch_grads, select_top_c, SsfPool};
use fedins_core::rng::{self, Rng, Stream};
use fedins_core::ssf::{modulate, modulate_backward, SsfEntry};
use fedins_core::Result;
use rand::Rng as _;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 10;

fn rng_for(seed: u64) -> Rng {
    rng::stream(seed, Stream::Init, &[0xC0FFEE])
}

fn uniform(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| 2.0 * r.random::<f64>() - 1.0).collect()
}

fn mat(rows: usize, cols: usize, r: &mut Rng) -> Matrix {
    Matrix::new(rows, cols, uniform(rows * cols, r)).unwrap()
}

fn block(name: &str, m: &Matrix) -> ParamBlock {
    ParamBlock::new(name, vec![m.rows(), m.cols()], m.data().to_vec()).unwrap()
}

fn as_mat(b: &ParamBlock) -> Matrix {
    Matrix::new(b.shape[0], b.shape[1], b.values.clone()).unwrap()
}

/// Scalar objective `Σ r ⊙ y` with fixed random `r`.
fn project(y: &Matrix, r: &Matrix) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn check(name: &str, report: GradCheckReport) {
    assert!(
        report.passed,
        "{name}: max rel err {:e} at {} ({})",
        report.max_rel_err, report.worst_coordinate, report.worst_block
    );
}

#[test]
fn linear_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng_for(seed);
        let (x, w, b, proj) = (
            mat(3, 4, &mut r),
            mat(5, 4, &mut r),
            uniform(5, &mut r),
            mat(3, 5, &mut r),
        );
        let params = vec![
            block("x", &x),
            block("w", &w),
            ParamBlock::new("b", vec![5], b).unwrap(),
        ];
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let (x, w) = (as_mat(&p[0]), as_mat(&p[1]));
            let y = linear(&x, &w, &p[2].values)?;
            let g = linear_backward(&proj, &x, &w)?;
            Ok((
                project(&y, &proj),
                vec![
                    block("x", &g.dx),
                    block("w", &g.dw),
                    ParamBlock::new("b", vec![5], g.db)?,
                ],
            ))
        };
        check("linear", finite_diff_check(f, &params, EPS, TOL).unwrap());
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng_for(seed);
        let (x, proj) = (mat(4, 8, &mut r), mat(4, 8, &mut r));
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let fwd = layer_norm_forward(&as_mat(&p[0]), 1e-5)?;
            let dx = layer_norm_backward(&proj, &fwd)?;
            Ok((project(&fwd.y, &proj), vec![block("x", &dx)]))
        };
        check("layer_norm", finite_diff_check(f, &[block("x", &x)], EPS, TOL).unwrap());
    }
}

#[test]
fn gelu_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng_for(seed);
        let x = Matrix::new(3, 6, uniform(18, &mut r).into_iter().map(|v| 3.0 * v).collect()).unwrap();
        let proj = mat(3, 6, &mut r);
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let x = as_mat(&p[0]);
            Ok((project(&gelu(&x)?, &proj), vec![block("x", &gelu_backward(&proj, &x)?)]))
        };
        check("gelu", finite_diff_check(f, &[block("x", &x)], EPS, TOL).unwrap());
    }
}

#[test]
fn gelu_gradient_at_half() {
    let x = Matrix::new(1, 1, vec![0.5]).unwrap();
    let one = Matrix::new(1, 1, vec![1.0]).unwrap();
    let analytic = gelu_backward(&one, &x).unwrap().data()[0];
    let f = |v: f64| gelu(&Matrix::new(1, 1, vec![v]).unwrap()).unwrap().data()[0];
    let numeric = (f(0.5 + 1e-6) - f(0.5 - 1e-6)) / 2e-6;
    assert!((analytic - numeric).abs() < 1e-6);
}

#[test]
fn softmax_xent_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng_for(seed);
        let logits = Matrix::new(3, 5, uniform(15, &mut r).into_iter().map(|v| 2.0 * v).collect()).unwrap();
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..5)).collect();
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let (l, g) = softmax_xent(&as_mat(&p[0]), &labels)?;
            Ok((l, vec![block("z", &g)]))
        };
        check(
            "softmax_xent",
            finite_diff_check(f, &[block("z", &logits)], EPS, TOL).unwrap(),
        );
    }
}

#[test]
fn modulate_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng_for(seed);
        let (x, proj) = (mat(4, 6, &mut r), mat(4, 6, &mut r));
        let params = vec![
            block("x", &x),
            ParamBlock::new("scale", vec![6], uniform(6, &mut r)).unwrap(),
            ParamBlock::new("shift", vec![6], uniform(6, &mut r)).unwrap(),
        ];
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let x = as_mat(&p[0]);
            let y = modulate(&x, &p[1].values, &p[2].values)?;
            let g = modulate_backward(&proj, &x, &p[1].values)?;
            Ok((
                project(&y, &proj),
                vec![
                    block("x", &g.dx),
                    ParamBlock::new("scale", vec![6], g.dscale)?,
                    ParamBlock::new("shift", vec![6], g.dshift)?,
                ],
            ))
        };
        check("modulate", finite_diff_check(f, &params, EPS, TOL).unwrap());
    }
}

fn toy_cfg(scheme: InsertionScheme) -> BackboneConfig {
    BackboneConfig {
        input_dim: 6,
        width: 8,
        depth: 2,
        n_classes: 4,
        scheme,
        ln_eps: 1e-5,
    }
}

fn toy_pool(bb: &FrozenBackbone, m: usize, seed: u64, per_entry_heads: bool) -> (SsfPool, Option<HeadParams>) {
    let mut r = rng_for(seed + 100);
    let entries = (0..m)
        .map(|_| SsfEntry::random_uniform(bb.spec(), 0.3, &mut r))
        .collect();
    let keys = (0..m).map(|_| uniform(bb.feature_dim(), &mut r)).collect();
    let head = HeadParams::random(bb.config().n_classes, bb.feature_dim(), &mut r);
    let heads = per_entry_heads.then(|| {
        (0..m)
            .map(|_| HeadParams::random(bb.config().n_classes, bb.feature_dim(), &mut r))
            .collect()
    });
    let shared = heads.is_none().then_some(head);
    (SsfPool::new(entries, keys, heads).unwrap(), shared)
}

fn pool_blocks(pool: &SsfPool, head: Option<&HeadParams>) -> Vec<ParamBlock> {
    pool.slices()
        .into_iter()
        .chain(head.map(HeadParams::slices).unwrap_or_default())
        .enumerate()
        .map(|(i, s)| ParamBlock::new(format!("s{i}"), vec![s.len()], s.to_vec()).unwrap())
        .collect()
}

fn load_blocks(pool: &mut SsfPool, head: Option<&mut HeadParams>, blocks: &[ParamBlock]) {
    let mut it = blocks.iter();
    for s in pool
        .slices_mut()
        .into_iter()
        .chain(head.map(HeadParams::slices_mut).unwrap_or_default())
    {
        s.copy_from_slice(&it.next().unwrap().values);
    }
}

fn pool_gradient_check(scheme: InsertionScheme, per_entry_heads: bool, seed: u64, batch: usize) -> GradCheckReport {
    let bb = FrozenBackbone::random(toy_cfg(scheme), seed).unwrap();
    let (pool, head) = toy_pool(&bb, 4, seed, per_entry_heads);
    let mut r = rng_for(seed + 200);
    let x = mat(batch, 6, &mut r);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..4)).collect();
    let c = 2;
    let sels = pool_batch_grads(&bb, &pool, head.as_ref(), &x, &labels, c, 0.5, None, None)
        .unwrap()
        .selections;
    let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
        let (mut pl, mut hd) = (pool.clone(), head.clone());
        load_blocks(&mut pl, hd.as_mut(), p);
        let out = pool_batch_grads(&bb, &pl, hd.as_ref(), &x, &labels, c, 0.5, None, Some(&sels))?;
        Ok((out.loss, pool_blocks(&out.grads.pool, out.grads.head.as_ref())))
    };
    finite_diff_check(f, &pool_blocks(&pool, head.as_ref()), EPS, TOL).unwrap()
}

#[test]
fn pool_forward_gradients_with_frozen_selection() {
    for seed in 0..SEEDS {
        let rep = pool_gradient_check(InsertionScheme::LinearAndNorm, false, seed, 1);
        std::println!("seed {seed}: rel {:e} abs {:e}", rep.max_rel_err, rep.max_abs_err);
        check("pool_forward", rep);
    }
}

/// Batched routing and non-default layouts. Central differences at 1e-6 carry
/// ~1e-10 absolute roundoff, so coordinates with |g| < 1e-5 can exceed 1e-5
/// relative error; these checks bound the absolute error instead.
#[test]
fn pool_batch_gradients_all_layouts() {
    for seed in 0..SEEDS {
        for (scheme, heads) in [
            (InsertionScheme::LinearAndNorm, false),
            (InsertionScheme::LinearOnly, false),
            (InsertionScheme::LinearAndNorm, true),
        ] {
            let rep = pool_gradient_check(scheme, heads, seed, 3);
            std::println!(
                "seed {seed} {scheme:?} {heads}: rel {:e} abs {:e}",
                rep.max_rel_err,
                rep.max_abs_err
            );
            assert!(
                rep.max_abs_err < 1e-9 && rep.max_rel_err < 1e-3,
                "{scheme:?}/{heads}: {rep:?}"
            );
        }
    }
}

#[test]
fn key_match_loss_gradients() {
    for seed in 0..SEEDS {
        let bb = FrozenBackbone::random(toy_cfg(InsertionScheme::LinearAndNorm), seed).unwrap();
        let (pool, _) = toy_pool(&bb, 5, seed, false);
        let mut r = rng_for(seed + 300);
        let q = QueryVector(uniform(8, &mut r));
        let sel = select_top_c(&pool, &q, 3).unwrap();
        let keys: Vec<ParamBlock> = pool
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| ParamBlock::new(format!("k{i}"), vec![k.len()], k.clone()).unwrap())
            .collect();
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let mut pl = pool.clone();
            for (k, b) in pl.keys.iter_mut().zip(p) {
                k.copy_from_slice(&b.values);
            }
            let (l, g) = key_match_loss(&q, &pl, &sel, 0.5)?;
            let mut grads: Vec<ParamBlock> = p.iter().map(ParamBlock::zeros_like).collect();
            for (m, gv) in g {
                grads[m].values = gv;
            }
            Ok((l, grads))
        };
        check("key_match_loss", finite_diff_check(f, &keys, EPS, TOL).unwrap());
    }
}

#[test]
fn proximal_penalty_gradients() {
    use fedins_core::federation::{proximal_penalty, Payload};
    let bb = FrozenBackbone::random(toy_cfg(InsertionScheme::LinearAndNorm), 3).unwrap();
    for seed in 0..SEEDS {
        let mut r = rng_for(seed);
        let random_payload = |r: &mut Rng| Payload::Full {
            backbone: {
                let mut p = bb.params().clone();
                for s in p.slices_mut() {
                    s.copy_from_slice(&uniform(s.len(), r));
                }
                p
            },
            head: HeadParams::random(4, 8, r),
        };
        let global = random_payload(&mut r);
        let local = random_payload(&mut r);
        let mu = 0.5 + r.random::<f64>();
        let f = |p: &[ParamBlock]| -> Result<(f64, Vec<ParamBlock>)> {
            let mut l = local.clone();
            l.load_blocks(p)?;
            let (pen, g) = proximal_penalty(&l, &global, mu)?;
            Ok((pen, g.blocks()))
        };
        check(
            "proximal_penalty",
            finite_diff_check(f, &local.blocks(), EPS, TOL).unwrap(),
        );
    }
}
