//! Synthetic tasks with a known answer: separable ID clusters in patch space,
//! OOD sets drawn around displaced cluster centres, and a noisy copy of the
//! model whose perturbation lives only in the minor singular subspace of
//! chosen `W_up` matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::linalg::{norm, svd, Matrix, SvdTriple};
use crate::model::{
    class_prompts, encode_image, encode_prompt_traced, init_weights, LabeledImage, ModelConfig,
    Tower, WeightKey, WeightStore, WeightType,
};

use super::config::{NoiseSpec, SyntheticSpec};

#[derive(Clone, Debug)]
pub struct OodSet {
    pub name: String,
    pub samples: Vec<LabeledImage>,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub id_train: Vec<LabeledImage>,
    pub id_val: Vec<LabeledImage>,
    pub id_test: Vec<LabeledImage>,
    pub ood_test: Vec<OodSet>,
    pub clean_store: WeightStore,
    pub noisy_store: WeightStore,
    /// Keys of the perturbed matrices.
    pub perturbed: Vec<WeightKey>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `k` orthogonal directions of norm `scale` in `dim` dimensions.
fn prototypes(rng: &mut ChaCha8Rng, k: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for p in &out {
            let c = crate::linalg::dot(&v, p) / crate::linalg::dot(p, p);
            for (x, y) in v.iter_mut().zip(p) {
                *x -= c * y;
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            out.push(v.iter().map(|x| x * scale / n).collect());
        }
    }
    out
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn draw(
    rng: &mut ChaCha8Rng,
    centres: &[Vec<f64>],
    n: usize,
    model: &ModelConfig,
    spec: &SyntheticSpec,
) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let label = i % centres.len();
            let centre = &centres[label];
            let patches = Matrix::from_fn(model.n_patches, model.input_dim, |p, c| {
                if p < spec.object_patches {
                    centre[c] + spec.cluster_spread * gaussian(rng)
                } else {
                    spec.background_scale * gaussian(rng)
                }
            });
            LabeledImage { patches, label }
        })
        .collect()
}

/// Moore–Penrose pseudo-inverse from the SVD, dropping components below a
/// relative cutoff.
fn pinv(t: &SvdTriple) -> Matrix {
    let (m, n) = t.source_shape();
    let cutoff = t.sigma.first().copied().unwrap_or(0.0) * 1e-10;
    let mut out = Matrix::zeros(n, m);
    for (i, &s) in t.sigma.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        for r in 0..n {
            for c in 0..m {
                out[(r, c)] += t.v[(r, i)] * t.u[(c, i)] / s;
            }
        }
    }
    out
}

/// Points the class space of `store` at the mean clean global feature of each
/// class: the text projection is solved so each prompt lands on its mean, or
/// the head columns are set to the normalised means.
fn calibrate(store: &WeightStore, train: &[LabeledImage]) -> Result<WeightStore> {
    let cfg = store.config();
    let k = cfg.n_classes;
    let mut means = Matrix::zeros(k, cfg.feature_dim);
    let mut counts = vec![0usize; k];
    for s in train {
        let g = encode_image(store, &s.patches)?.global;
        for (o, v) in means.row_mut(s.label).iter_mut().zip(&g) {
            *o += v;
        }
        counts[s.label] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return invalid(format!("class {c} has no training samples"));
        }
        for v in means.row_mut(c) {
            *v /= n as f64;
        }
    }
    if cfg.unimodal {
        let head = Matrix::from_fn(cfg.feature_dim, k, |r, c| means[(c, r)] / norm(means.row(c)));
        return store.set_weight(&WeightKey::tower_level(Tower::Vision, WeightType::Head), head);
    }
    // eos states (K x d) times W_p must equal the means (K x f).
    let mut eos = Matrix::zeros(k, cfg.hidden_dim);
    for (c, p) in class_prompts(k).iter().enumerate() {
        let (_, trace) = encode_prompt_traced(store, p, false)?;
        eos.row_mut(c).copy_from_slice(trace.hidden.row(trace.hidden.rows() - 1));
    }
    let wp = pinv(&svd(&eos)?).matmul(&means);
    store.set_weight(&WeightKey::tower_level(Tower::Text, WeightType::Wp), wp)
}

/// Shrinks the tail of each noised `W_up` (clean side), then adds
/// `U_minor · G · V_minorᵀ` where `G` is `scale · sigma_{r_true}` times a random
/// orthogonal matrix.
fn inject(
    clean: &WeightStore,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(WeightStore, WeightStore, Vec<WeightKey>)> {
    let mut clean = clean.clone();
    let mut noisy_parts = Vec::new();
    let mut keys = Vec::new();
    for l in &noise.layers {
        let key = WeightKey::new(l.tower, l.layer, WeightType::Wup);
        let mut t = svd(clean.get(&key)?)?;
        let k = t.rank_capacity();
        let r = noise.r_true;
        if noise.tail_shrink != 1.0 {
            for s in &mut t.sigma[r..] {
                *s *= noise.tail_shrink;
            }
            clean = clean.set_weight(&key, t.reconstruct())?;
        }
        let minor = k - r;
        // Random orthogonal mixing (polar factor of a Gaussian matrix), so
        // every minor direction carries the full noise level.
        let raw = svd(&Matrix::from_fn(minor, minor, |_, _| gaussian(rng)))?;
        let g = raw.u.matmul_t(&raw.v).scale(noise.scale * t.sigma[r - 1]);
        let (m, n) = t.source_shape();
        let u_minor = Matrix::from_fn(m, minor, |i, j| t.u[(i, r + j)]);
        let v_minor = Matrix::from_fn(n, minor, |i, j| t.v[(i, r + j)]);
        noisy_parts.push((key, u_minor.matmul(&g).matmul_t(&v_minor)));
        keys.push(key);
    }
    let mut noisy = clean.clone();
    for (key, delta) in noisy_parts {
        let w = noisy.get(&key)?.add(&delta);
        noisy = noisy.set_weight(&key, w)?;
    }
    Ok((clean, noisy, keys))
}

/// Norm of the part of `noisy - clean` seen by the top `r` singular pairs of
/// the clean matrix: `‖U_rᵀ Δ‖_F + ‖Δ V_r‖_F`.
pub fn principal_leak(clean: &Matrix, noisy: &Matrix, r: usize) -> Result<f64> {
    let t = svd(clean)?;
    let delta = noisy.sub(clean);
    let (m, n) = clean.shape();
    let u_r = Matrix::from_fn(m, r, |i, j| t.u[(i, j)]);
    let v_r = Matrix::from_fn(n, r, |i, j| t.v[(i, j)]);
    Ok(u_r.t_matmul(&delta).frobenius_norm() + delta.matmul(&v_r).frobenius_norm())
}

pub fn generate_task(model: &ModelConfig, seed: u64, spec: &SyntheticSpec) -> Result<SyntheticTask> {
    model.validate()?;
    spec.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e7a_u64);
    let base = init_weights(model, seed)?;

    let k = model.n_classes;
    let protos = prototypes(&mut rng, k, model.input_dim, spec.prototype_scale);
    let id_train = draw(&mut rng, &protos, spec.n_train, model, spec);
    let id_val = draw(&mut rng, &protos, spec.n_val, model, spec);
    let id_test = draw(&mut rng, &protos, spec.n_test, model, spec);
    let mut ood_test = Vec::with_capacity(spec.n_ood_sets);
    for s in 0..spec.n_ood_sets {
        let centres: Vec<Vec<f64>> = protos
            .iter()
            .map(|p| {
                let u = unit(&mut rng, model.input_dim);
                p.iter().zip(&u).map(|(a, b)| a + spec.ood_displacement * b).collect()
            })
            .collect();
        let mut samples = draw(&mut rng, &centres, spec.n_ood, model, spec);
        for smp in &mut samples {
            smp.label = 0;
        }
        ood_test.push(OodSet { name: format!("ood{s}"), samples });
    }

    let has_layers = !spec.noise.layers.is_empty();
    let (clean_base, noisy_base, keys) = if has_layers {
        inject(&base, &spec.noise, &mut rng)?
    } else {
        (base.clone(), base, Vec::new())
    };
    let clean_store = calibrate(&clean_base, &id_train)?;
    let (noisy_store, perturbed) = if has_layers && spec.noise.scale > 0.0 {
        (rebase(&clean_store, &noisy_base, &keys)?, keys)
    } else {
        (clean_store.clone(), Vec::new())
    };
    Ok(SyntheticTask { id_train, id_val, id_test, ood_test, clean_store, noisy_store, perturbed })
}

/// `clean` with the perturbed matrices taken from `noisy`.
fn rebase(clean: &WeightStore, noisy: &WeightStore, keys: &[WeightKey]) -> Result<WeightStore> {
    let mut out = clean.clone();
    for k in keys {
        out = out.set_weight(k, noisy.get(k)?.clone())?;
    }
    Ok(out)
}
