//! Acceptance suite. Every criterion runs in one test so the timings are not
//! skewed by other tests sharing the thread pool; each prints a PASS/FAIL
//! line and the test fails if any criterion does.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use setar::finetune::{ft_grads, ft_init, ft_train, FtConfig, FtLayerState};
use setar::harness::pipeline::{class_space, evaluate_model, load_inputs, search_stage, write_trace};
use setar::harness::{generate_task, DataConfig};
use setar::linalg::{ft_split, low_rank_approx, reduced_rank, svd};
use setar::loss::{
    dataset_loss, locoop_loss, ood_regions, patch_probs, ClassSpace, LossParams,
};
use setar::metrics::{auroc, fpr_at_tpr};
use setar::model::{class_prompts, init_weights, ConceptBank, EncodedImage, LabeledImage};
use setar::scoring::{energy_score, glmcm_score, mcm_score, msp_score, ScoreSet};
use setar::search::{
    apply_plan, greedy_search, search_order, Modality, PlanEntry, RankPlan, SearchAlgorithm,
    SearchConfig, DEFAULT_CANDIDATES,
};
use setar::{Matrix, PruneStrategy, Tower, WeightStore, WeightType};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Neumaier-compensated sum, used by the high-precision oracles.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

// ---------------------------------------------------------------- 1. SVD

fn svd_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rec, mut worst_frob, mut worst_ey) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (m, n) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let w = random_matrix(&mut rng, m, n);
        let t = svd(&w).map_err(|e| e.to_string())?;
        let w_sq = w.frobenius_sq();
        worst_rec = worst_rec.max(w.sub(&t.reconstruct()).frobenius_norm() / w.frobenius_norm());
        let sigma_sq: Vec<f64> = t.sigma.iter().map(|s| s * s).collect();
        worst_frob = worst_frob.max((compensated_sum(sigma_sq.iter().copied()) - w_sq).abs() / w_sq);
        for r in 0..=t.sigma.len() {
            let approx = low_rank_approx(&t, r, PruneStrategy::minor()).map_err(|e| e.to_string())?;
            let residual = w.sub(&approx).frobenius_sq();
            let tail = compensated_sum(sigma_sq[r..].iter().copied());
            worst_ey = worst_ey.max((residual - tail).abs() / w_sq);
        }
    }
    ensure(worst_rec < 1e-5, || format!("reconstruction error {worst_rec:e}"))?;
    ensure(worst_frob < 1e-9, || format!("Frobenius identity error {worst_frob:e}"))?;
    ensure(worst_ey < 1e-9, || format!("residual identity error {worst_ey:e}"))?;
    Ok(format!("max rel errors: recon {worst_rec:.1e}, frob {worst_frob:.1e}, residual {worst_ey:.1e}"))
}

// ---------------------------------------------------------- 2. Rank formula

fn rank_formula() -> Outcome {
    let mut checked = 0;
    for (j, &ratio) in DEFAULT_CANDIDATES.iter().enumerate() {
        // ratio = j/20 exactly on the grid; round half up in integers.
        let grid = (j as f64) / 20.0;
        ensure((ratio - grid).abs() < 1e-12, || format!("candidate {j} is {ratio}, not {grid}"))?;
        for r in 1..=1024usize {
            let kept_x20 = (20 - j) * r;
            let expected = (kept_x20 + 10) / 20;
            let got = reduced_rank(r, ratio).map_err(|e| e.to_string())?;
            ensure(got == expected, || format!("rank {r} ratio {ratio}: got {got}, expected {expected}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (rank, ratio) pairs"))
}

// -------------------------------------------------------------- 3. FT split

fn ft_split_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (m, n) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let w = random_matrix(&mut rng, m, n);
        let t = svd(&w).map_err(|e| e.to_string())?;
        for r in 0..=t.sigma.len() {
            let (w_hat, b, a) = ft_split(&t, r).map_err(|e| e.to_string())?;
            let rebuilt = if b.cols() == 0 { w_hat } else { w_hat.add(&b.matmul(&a)) };
            worst = worst.max(w.sub(&rebuilt).frobenius_norm() / w.frobenius_norm());
        }
    }
    ensure(worst < 1e-5, || format!("split error {worst:e}"))?;
    Ok(format!("max rel error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4. Scores

fn oracle_max_softmax(values: &[f64], t: f64) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = values.iter().map(|v| ((v - max) / t).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    1.0 / compensated_sum(terms)
}

fn oracle_energy(logits: &[f64], t: f64) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = logits.iter().map(|v| ((v - max) / t).exp()).filter(|&e| e != 1.0).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // The maximum contributes exactly 1 (once per occurrence); ln_1p keeps the
    // small remainder accurate.
    let ones = logits.iter().filter(|&&v| v == max).count() as f64;
    max + t * (ones.ln() + (compensated_sum(terms) / ones).ln_1p())
}

fn scoring_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let k = rng.gen_range(2..=10);
        let kf = k as f64;
        let global: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let local: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (tau, tau_l) = (rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0));
        let mcm = mcm_score(&global, tau);
        let gl = glmcm_score(&global, &local, tau, tau_l);
        ensure(mcm > 1.0 / kf && mcm <= 1.0, || format!("MCM {mcm} outside (1/{k}, 1]"))?;
        ensure(gl > 2.0 / kf && gl <= 2.0, || format!("GL-MCM {gl} outside (2/{k}, 2]"))?;
        worst = worst.max((mcm - oracle_max_softmax(&global, tau)).abs());
        worst = worst
            .max((gl - oracle_max_softmax(&global, tau) - oracle_max_softmax(&local, tau_l)).abs());

        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let t = rng.gen_range(0.1..2.0);
        worst = worst.max((msp_score(&logits) - oracle_max_softmax(&logits, 1.0)).abs());
        worst = worst.max((energy_score(&logits, t) - oracle_energy(&logits, t)).abs());
    }
    ensure(worst <= 1e-12, || format!("oracle disagreement {worst:e}"))?;

    let mut worst_big = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-1e4..1e4)).collect();
        let t = rng.gen_range(0.1..2.0);
        let e = energy_score(&logits, t);
        ensure(e.is_finite(), || format!("energy not finite for {logits:?}"))?;
        let o = oracle_energy(&logits, t);
        worst_big = worst_big.max((e - o).abs() / o.abs().max(1.0));
    }
    ensure(worst_big <= 1e-12, || format!("large-logit energy disagreement {worst_big:e}"))?;
    Ok(format!("max abs error {worst:.1e}; |logits| to 1e4 rel error {worst_big:.1e}"))
}

// --------------------------------------------------------------- 5. Metrics

fn pairwise_auroc(s: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    for &a in &s.id_scores {
        for &b in &s.ood_scores {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    wins / (s.id_scores.len() * s.ood_scores.len()) as f64
}

/// FPR at `percent`% TPR by enumerating every ID score as a threshold: the
/// largest one rejecting strictly fewer than `(1 - tpr) · n` ID samples.
fn brute_force_fpr(s: &ScoreSet, percent: usize) -> f64 {
    let n = s.id_scores.len();
    let best = s
        .id_scores
        .iter()
        .copied()
        .filter(|&lambda| {
            let rejected = s.id_scores.iter().filter(|&&v| v < lambda).count();
            rejected * 100 < (100 - percent) * n
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let lambda = if best.is_finite() {
        best
    } else {
        s.id_scores.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    s.ood_scores.iter().filter(|&&v| v >= lambda).count() as f64 / s.ood_scores.len() as f64
}

fn metrics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut fpr_checks = 0;
    for i in 0..100 {
        let (n_id, n_ood) = (rng.gen_range(1..=200), rng.gen_range(1..=200));
        // Every other set is quantised so ties are common.
        let levels = if i % 2 == 0 { 0.0 } else { rng.gen_range(2..20) as f64 };
        let mut draw = |shift: f64| {
            let v: f64 = rng.gen_range(-1.0..1.0) + shift;
            if levels > 0.0 { (v * levels).round() / levels } else { v }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(0.3)).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| draw(0.0)).collect();
        let s = ScoreSet::new("x", id.clone(), ood.clone());
        let a = auroc(&s).map_err(|e| e.to_string())?;
        worst = worst.max((a - pairwise_auroc(&s)).abs());
        let swapped = auroc(&ScoreSet::new("x", ood, id)).map_err(|e| e.to_string())?;
        worst = worst.max((swapped - (1.0 - a)).abs());
        for percent in 1..100 {
            let got = fpr_at_tpr(&s, percent as f64 / 100.0).map_err(|e| e.to_string())?;
            let expected = brute_force_fpr(&s, percent);
            ensure(got == expected, || format!("set {i} tpr {percent}%: fpr {got} vs brute force {expected}"))?;
            fpr_checks += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("AUROC disagreement {worst:e}"))?;
    Ok(format!("AUROC max error {worst:.1e}; {fpr_checks} exact FPR checks"))
}

// ------------------------------------------------------------ 6. LoCoOp loss

fn random_instance(rng: &mut ChaCha8Rng) -> (EncodedImage, ConceptBank, usize) {
    let (k, l, d) = (rng.gen_range(2..=6), rng.gen_range(1..=8), rng.gen_range(2..=6));
    let img = EncodedImage {
        global: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        local: random_matrix(rng, l, d),
    };
    let bank = ConceptBank {
        features: random_matrix(rng, k, d),
        class_names: (0..k).map(|c| format!("c{c}")).collect(),
    };
    let y = rng.gen_range(0..k);
    (img, bank, y)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn softmax_ref(v: &[f64], t: f64) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Loss assembled from its definition: cross-entropy on the global cosines,
/// plus `lambda` times the negated mean entropy over patches that rank the
/// true class below `top_k`.
fn oracle_loss(img: &EncodedImage, bank: &ConceptBank, y: usize, p: &LossParams) -> (f64, Vec<usize>) {
    let k = bank.features.rows();
    let global: Vec<f64> = (0..k).map(|c| cos(&img.global, bank.features.row(c))).collect();
    let id = -softmax_ref(&global, p.tau_local)[y].ln();
    let mut regions = Vec::new();
    let mut entropies = Vec::new();
    for i in 0..img.local.rows() {
        let sims: Vec<f64> = (0..k).map(|c| cos(img.local.row(i), bank.features.row(c))).collect();
        let probs = softmax_ref(&sims, p.tau_local);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&c| c == y).unwrap() + 1;
        if rank > p.top_k {
            regions.push(i);
            entropies.push(-probs.iter().map(|q| q * q.ln()).sum::<f64>());
        }
    }
    let ood = if entropies.is_empty() { 0.0 } else { -entropies.iter().sum::<f64>() / entropies.len() as f64 };
    (id + p.lambda_ood * ood, regions)
}

fn locoop_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (img, bank, y) = random_instance(&mut rng);
        let k = bank.n_classes();
        let params = LossParams {
            lambda_ood: rng.gen_range(0.0..1.0),
            top_k: rng.gen_range(0..=k),
            tau_local: rng.gen_range(0.05..2.0),
        };
        let got = locoop_loss(&img, &bank, y, &params).map_err(|e| e.to_string())?;
        let (expected, regions) = oracle_loss(&img, &bank, y, &params);
        worst = worst.max((got.total - expected).abs());
        ensure((got.ood_patch_fraction - regions.len() as f64 / img.local.rows() as f64).abs() < 1e-15, || {
            format!("instance {i}: region fraction differs")
        })?;

        let probs = patch_probs(&img, &bank, params.tau_local).map_err(|e| e.to_string())?;
        let all: Vec<usize> = (0..img.local.rows()).collect();
        ensure(ood_regions(&probs, y, 0) == all, || format!("instance {i}: top_k=0 is not every patch"))?;
        ensure(ood_regions(&probs, y, k).is_empty(), || format!("instance {i}: top_k=K is not empty"))?;
        let mut prev = ood_regions(&probs, y, 0);
        for top_k in 1..=k {
            let cur = ood_regions(&probs, y, top_k);
            ensure(cur.iter().all(|j| prev.contains(j)), || format!("instance {i}: J grows at top_k={top_k}"))?;
            prev = cur;
        }
    }
    ensure(worst <= 1e-10, || format!("oracle disagreement {worst:e}"))?;
    Ok(format!("max abs error {worst:.1e}"))
}

// ---------------------------------------------------------- 7. Greedy search

fn loss_of(store: &WeightStore, val: &[LabeledImage], space: &ClassSpace, p: &LossParams) -> f64 {
    dataset_loss(store, val, space, p).unwrap().total
}

/// Store with the W_up of `key` replaced by its reduced-rank version, built
/// straight from the SVD of the original matrix.
fn reduced(base: &WeightStore, original: &WeightStore, key: &setar::WeightKey, ratio: f64) -> WeightStore {
    let w = original.get(key).unwrap();
    let t = svd(w).unwrap();
    let k = t.sigma.len();
    let r = reduced_rank(k, ratio).unwrap();
    if r == k {
        return base.set_weight(key, w.clone()).unwrap();
    }
    base.set_weight(key, low_rank_approx(&t, r, PruneStrategy::minor()).unwrap()).unwrap()
}

fn greedy_suite() -> Outcome {
    let params = LossParams::default();
    let space = ClassSpace::Prompts(class_prompts(3));
    let cfg = SearchConfig::default();
    for seed in 0..20 {
        let task = generate_task(&common::tiny_model(2, 2), seed, &common::tiny_spec()).map_err(|e| e.to_string())?;
        let store = &task.noisy_store;
        let out = greedy_search(store, &task.id_val, &space, &cfg).map_err(|e| e.to_string())?;
        let l0 = out.initial.loss.total;
        let mut prev = l0;
        for row in &out.trace.rows {
            ensure(row.loss.total <= prev, || format!("seed {seed}: trace loss rises at step {}", row.step))?;
            prev = row.loss.total;
        }
        ensure(out.final_eval.loss.total <= l0, || format!("seed {seed}: final loss above L0"))?;
        let recomputed = loss_of(&out.store, &task.id_val, &space, &params);
        ensure(recomputed == out.final_eval.loss.total, || format!("seed {seed}: final loss not reproducible"))?;
        let replay = apply_plan(store, &out.plan).map_err(|e| e.to_string())?;
        ensure(replay == out.store, || format!("seed {seed}: apply_plan replay differs"))?;

        let zero = SearchConfig { candidates: vec![0.0], ..cfg.clone() };
        let noop = greedy_search(store, &task.id_val, &space, &zero).map_err(|e| e.to_string())?;
        ensure(&noop.store == store && noop.plan.ratios().iter().all(|&r| r == 0.0), || {
            format!("seed {seed}: candidates={{0}} changed the store")
        })?;
    }

    // Two-layer model: tabulate the loss of every (vision, text) ratio pair and
    // derive the greedy decisions from the table.
    let model = common::tiny_model(1, 1);
    let order = search_order(&model, WeightType::Wup, Modality::VisionText, SearchAlgorithm::Sequential)
        .map_err(|e| e.to_string())?;
    let mut matched = 0;
    for seed in 0..5 {
        let task = generate_task(&model, seed, &common::tiny_spec()).map_err(|e| e.to_string())?;
        let store = &task.noisy_store;
        let out = greedy_search(store, &task.id_val, &space, &cfg).map_err(|e| e.to_string())?;
        let cands = &cfg.candidates;
        let table: Vec<Vec<f64>> = cands
            .iter()
            .map(|&a| {
                let first = reduced(store, store, &order[0], a);
                cands
                    .iter()
                    .map(|&b| loss_of(&reduced(&first, store, &order[1], b), &task.id_val, &space, &params))
                    .collect()
            })
            .collect();
        let l0 = table[0][0];
        let mut best = (0, l0);
        for (i, row) in table.iter().enumerate().skip(1) {
            if row[0] < best.1 {
                best = (i, row[0]);
            }
        }
        let first = best.0;
        let mut second = (0, best.1);
        for (j, &l) in table[first].iter().enumerate().skip(1) {
            if l < second.1 {
                second = (j, l);
            }
        }
        let expected = vec![cands[first], cands[second.0]];
        ensure(out.plan.ratios() == expected, || {
            format!("seed {seed}: greedy chose {:?}, enumeration gives {expected:?}", out.plan.ratios())
        })?;
        ensure(out.final_eval.loss.total == second.1, || format!("seed {seed}: final loss differs from table"))?;
        matched += 1;
    }
    Ok(format!("20 tasks checked; {matched} two-layer tasks match enumeration"))
}

// ---------------------------------------------------------- 8. Recovery

fn recovery_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut v, mut s, mut c) = (0.0, 0.0, 0.0);
    let mut nonzero = 0;
    let seeds = 5;
    for seed in 0..seeds {
        let cfg = common::recovery_config(seed, dir.path());
        let DataConfig::Synthetic(spec) = &cfg.data else { return Err("recovery config is not synthetic".into()) };
        let perturbed = &spec.noise.layers[0];
        let inputs = load_inputs(&cfg).map_err(|e| e.to_string())?;
        let out = search_stage(&inputs, &cfg).map_err(|e| e.to_string())?;
        let ratio = out.plan.entries.iter().find(|e| e.tower == perturbed.tower && e.layer == perturbed.layer).map(|e| e.ratio);
        if ratio.is_some_and(|r| r > 0.0) {
            nonzero += 1;
        }
        let average = |name: &str, store: &WeightStore| -> Result<f64, String> {
            let rows = evaluate_model(name, store, &inputs, &cfg, None).map_err(|e| e.to_string())?;
            rows.iter()
                .find(|r| r.score == "gl-mcm" && r.dataset == "Average")
                .map(|r| r.auroc)
                .ok_or_else(|| "no GL-MCM average row".to_string())
        };
        v += average("vanilla", &inputs.vanilla)?;
        s += average("setar", &out.store)?;
        c += average("clean", inputs.reference.as_ref().ok_or("task has no clean store")?)?;
    }
    let n = seeds as f64;
    let (v, s, c) = (v / n, s / n, c / n);
    let summary = format!("perturbed layer pruned in {nonzero}/{seeds} seeds; AUROC vanilla {v:.4}, SeTAR {s:.4}, clean {c:.4}");
    ensure(nonzero == seeds, || format!("(a) failed: {summary}"))?;
    ensure(s >= v + 0.02, || format!("(b) failed: {summary}"))?;
    ensure((s - c).abs() <= 0.05, || format!("(c) failed: {summary}"))?;
    Ok(summary)
}

// ------------------------------------------------------- 9. Gradient check

fn fd_check() -> Result<usize, String> {
    let model = common::tiny_model(2, 2);
    let store = init_weights(&model, 9).map_err(|e| e.to_string())?;
    let space = ClassSpace::Prompts(class_prompts(model.n_classes));
    let params = LossParams { lambda_ood: 0.5, top_k: 1, tau_local: 0.5 };
    let plan = RankPlan {
        weight_type: WeightType::Wup,
        strategy: PruneStrategy::minor(),
        modality: Modality::VisionText,
        entries: vec![
            PlanEntry { tower: Tower::Vision, layer: 1, ratio: 0.25 },
            PlanEntry { tower: Tower::Vision, layer: 0, ratio: 0.4 },
            PlanEntry { tower: Tower::Text, layer: 1, ratio: 0.25 },
            PlanEntry { tower: Tower::Text, layer: 0, ratio: 0.4 },
        ],
    };
    let ft = FtConfig { loss_params: params, ..FtConfig::default() };
    let states = ft_init(&store, &plan, &ft).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<LabeledImage> = (0..4)
        .map(|i| LabeledImage { patches: random_matrix(&mut rng, model.n_patches, model.input_dim), label: i % 3 })
        .collect();
    let loss = |st: &[FtLayerState]| ft_grads(&store, st, &batch, &space, &params).unwrap().0.total;
    let (_, grads) = ft_grads(&store, &states, &batch, &space, &params).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut checked = 0;
    for (si, g) in grads.iter().enumerate() {
        for (name, analytic) in [("A", &g.d_a), ("B", &g.d_b)] {
            for idx in 0..analytic.as_slice().len() {
                let bump = |delta: f64| {
                    let mut st = states.clone();
                    let m = if name == "A" { &mut st[si].a } else { &mut st[si].b };
                    m.as_mut_slice()[idx] += delta;
                    loss(&st)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = analytic.as_slice()[idx];
                ensure((fd - an).abs() <= 1e-4f64.max(1e-2 * an.abs()), || {
                    format!("layer {si} d{name}[{idx}]: analytic {an} vs central difference {fd}")
                })?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

fn finetune_suite() -> Outcome {
    let checked = fd_check()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::recovery_config(0, dir.path());
    let inputs = load_inputs(&cfg).map_err(|e| e.to_string())?;
    let searched = search_stage(&inputs, &cfg).map_err(|e| e.to_string())?;
    let ft = cfg.ft_stage().ok_or("recovery config has no ft section")?;
    ensure(ft.epochs == 5, || format!("recovery ft runs {} epochs, expected 5", ft.epochs))?;
    let space = class_space(inputs.vanilla.config());
    let before = ft_init(&inputs.vanilla, &searched.plan, &ft).map_err(|e| e.to_string())?;
    let out = ft_train(&inputs.vanilla, &searched.plan, &inputs.id_train, &space, &ft).map_err(|e| e.to_string())?;
    for (a, b) in before.iter().zip(&out.states) {
        ensure(a.w_hat == b.w_hat, || format!("{} w_hat changed during training", a.key.name()))?;
    }
    let first = out.loss_curve.first().ok_or("empty loss curve")?.total;
    let last = out.loss_curve.last().ok_or("empty loss curve")?.total;
    ensure(last < first, || format!("loss did not decrease: {first} -> {last}"))?;
    Ok(format!("{checked} gradient entries; frozen parts intact; loss {first:.6} -> {last:.6}"))
}

// --------------------------------------------------------- 10. Trace format

fn trace_suite() -> Outcome {
    let task = generate_task(&common::tiny_model(2, 2), 0, &common::tiny_spec()).map_err(|e| e.to_string())?;
    let space = ClassSpace::Prompts(class_prompts(3));
    let out = greedy_search(&task.noisy_store, &task.id_val, &space, &SearchConfig::default())
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_trace(&out.trace, dir.path()).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("trace.csv")).map_err(|e| e.to_string())?;
    let header = text.lines().next().unwrap_or_default();
    let expected = "step,tower_type,weight_type,layer_num,best_ratio,total_loss,id_loss,ood_loss,val_acc,ood_patch_percent";
    ensure(header == expected, || format!("header {header:?}"))?;
    ensure(text.lines().count() == out.trace.rows.len() + 1, || "row count differs from trace".into())?;
    Ok(format!("{} rows", out.trace.rows.len()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1 svd", svd_suite, Duration::from_secs(10)),
        ("2 rank formula", rank_formula, Duration::from_secs(1)),
        ("3 ft split", ft_split_suite, Duration::from_secs(10)),
        ("4 scoring", scoring_suite, Duration::from_secs(5)),
        ("5 metrics", metrics_suite, Duration::from_secs(10)),
        ("6 locoop loss", locoop_suite, Duration::from_secs(5)),
        ("7 greedy search", greedy_suite, Duration::from_secs(60)),
        ("8 recovery", recovery_suite, Duration::from_secs(300)),
        ("9 gradients", finetune_suite, Duration::from_secs(120)),
        ("10 trace format", trace_suite, Duration::from_secs(1)),
    ];
    let mut failed = Vec::new();
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let verdict = match (&result, elapsed <= budget) {
            (Ok(_), true) => "PASS",
            _ => "FAIL",
        };
        let detail = match &result {
            Ok(d) => d.clone(),
            Err(e) => e.clone(),
        };
        println!("criterion {name}: {verdict} ({:.2}s of {}s) {detail}", elapsed.as_secs_f64(), budget.as_secs());
        if verdict == "FAIL" {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
