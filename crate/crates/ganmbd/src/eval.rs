//! Evaluation: inception score over classifier outputs, the desk-scale
//! evaluation classifier itself, parameter audits of discriminator
//! configurations, and timing reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::cls_loss_term;
use crate::networks::{Classifier, Discriminator, MultiBranchDiscriminatorSpec};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tape::Tape;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Inception score
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ISReport {
    pub mean: f64,
    pub std: f64,
    pub splits: usize,
    pub per_split: Vec<f64>,
}

/// Convention for the number of IS splits: 10 once enough samples exist.
pub fn default_splits(num_samples: usize) -> usize {
    if num_samples >= 500 {
        10
    } else {
        1
    }
}

/// Inception score of an M x K matrix of class distributions:
/// per split, exp(mean_x KL(p(y|x) || p_bar)) with p_bar the split marginal.
pub fn inception_score(probs: &Tensor<f32>, splits: usize) -> Result<ISReport> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::usage("inception_score expects an M x K matrix"));
    }
    let (m, k) = (shape[0], shape[1]);
    if splits == 0 || m < splits {
        return Err(Error::usage(format!("need at least {splits} rows for {splits} splits")));
    }
    for i in 0..m {
        let row = &probs.data()[i * k..(i + 1) * k];
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        // f32 softmax rows can miss 1.0 by a few ulps per class
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::usage(format!("row {i} is not a probability distribution (sum {sum})")));
        }
    }

    let mut per_split = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * m / splits;
        let hi = (s + 1) * m / splits;
        let rows = hi - lo;
        let mut marginal = vec![0.0f64; k];
        for i in lo..hi {
            for j in 0..k {
                marginal[j] += probs.data()[i * k + j] as f64 / rows as f64;
            }
        }
        let mut mean_kl = 0.0;
        for i in lo..hi {
            let mut kl = 0.0;
            for j in 0..k {
                let p = probs.data()[i * k + j] as f64;
                if p > 0.0 && marginal[j] > 0.0 {
                    kl += p * (p / marginal[j]).ln();
                }
            }
            mean_kl += kl / rows as f64;
        }
        per_split.push(mean_kl.exp());
    }
    let mean = per_split.iter().sum::<f64>() / splits as f64;
    let var = per_split.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok(ISReport { mean, std: var.sqrt(), splits, per_split })
}

// ---------------------------------------------------------------------------
// Evaluation classifier
// ---------------------------------------------------------------------------

/// Accuracy bar the evaluation classifier must clear before its scores count.
pub const EVAL_CLASSIFIER_MIN_ACCURACY: f64 = 0.95;

/// Frozen classifier standing in for the paper's inception network.
pub struct EvalClassifier {
    pub net: Classifier,
    pub store: ParamStore<f32>,
    /// Held-out accuracy measured at certification time.
    pub accuracy: f64,
}

impl EvalClassifier {
    /// Class probabilities for a [N,3,H,W] batch, evaluated in chunks.
    pub fn predict_probs(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = images.shape().to_vec();
        let n = shape[0];
        let k = self.net.num_classes;
        let per = shape[1] * shape[2] * shape[3];
        let mut out = Tensor::zeros(vec![n, k]);
        let chunk = 64;
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let sub = Tensor::from_vec(
                vec![end - start, shape[1], shape[2], shape[3]],
                images.data()[start * per..end * per].to_vec(),
            )?;
            let probs = self.net.predict_probs(&self.store, &sub)?;
            out.data_mut()[start * k..end * k].copy_from_slice(probs.data());
        }
        Ok(out)
    }

    /// Fraction of images whose argmax class equals `labels`.
    pub fn accuracy_on(&self, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let probs = self.predict_probs(images)?;
        let k = self.net.num_classes;
        let mut correct = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = &probs.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Train a small conv classifier on the labeled dataset and certify it on
/// the held-out split; refuses to return one below the accuracy bar.
pub fn train_eval_classifier(
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<EvalClassifier> {
    if train.num_classes() < 2 {
        return Err(Error::config("classifier training needs at least 2 classes"));
    }
    let k = train.num_classes();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Classifier::build(k, train.image_side, 8, &mut store, "clf", &mut rng)?;
    let ids = store.ids_with_prefix("clf");
    let mut opt = Adam::new(&store, ids, 1e-3, 0.9, 0.999)?;

    let batch_size = 32;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let images = train.batch(chunk)?;
            let labels = train.label_batch(chunk)?;
            let tape = Tape::new();
            let x = tape.constant(images);
            let logits = net.forward(&tape, &store, x)?;
            let loss = cls_loss_term(&tape, &[logits], &labels)?;
            let grads = tape.backward(loss, &store)?;
            opt.step(&mut store, &grads)?;
        }
    }

    let clf = EvalClassifier { net, store, accuracy: 0.0 };
    let test_images = test.batch(&(0..test.len()).collect::<Vec<_>>())?;
    let accuracy = clf.accuracy_on(&test_images, &test.labels)?;
    if accuracy < EVAL_CLASSIFIER_MIN_ACCURACY {
        return Err(Error::eval(format!(
            "evaluation classifier reached only {:.1}% held-out accuracy (needs {:.0}%); refusing to certify scores",
            100.0 * accuracy,
            100.0 * EVAL_CLASSIFIER_MIN_ACCURACY
        )));
    }
    Ok(EvalClassifier { accuracy, ..clf })
}

// ---------------------------------------------------------------------------
// Parameter auditing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerCount {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct ParamAudit {
    pub per_layer: Vec<LayerCount>,
    pub total: usize,
    pub branches: usize,
}

impl ParamAudit {
    pub fn from_layers(per_layer: Vec<LayerCount>, branches: usize) -> Self {
        let total = per_layer.iter().map(|l| l.params).sum();
        ParamAudit { per_layer, total, branches }
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let width = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
        out.push_str(&format!("{:<width$}  {:>5} {:>5} {:>3} {:>12}\n", "layer", "in", "out", "k", "params"));
        for l in &self.per_layer {
            out.push_str(&format!(
                "{:<width$}  {:>5} {:>5} {:>3} {:>12}\n",
                l.name, l.in_ch, l.out_ch, l.kernel, l.params
            ));
        }
        out.push_str(&format!("{:<width$}  {:>5} {:>5} {:>3} {:>12}\n", "total", "", "", "", self.total));
        out
    }
}

/// Exact per-layer and total counts for a built discriminator.
pub fn count_parameters(disc: &Discriminator) -> ParamAudit {
    let mut per_layer = Vec::new();
    for (b, branch) in disc.branch_layers().iter().enumerate() {
        for (name, layer) in branch {
            per_layer.push(LayerCount {
                name: format!("b{b}.{name}"),
                in_ch: layer.in_ch,
                out_ch: layer.out_ch,
                kernel: layer.k,
                params: layer.param_count(),
            });
        }
    }
    ParamAudit::from_layers(per_layer, disc.spec.branches)
}

/// Connections between hidden conv layers only (first layer and heads
/// excluded): the quantity obeying the exact 1/N scaling law.
pub fn hidden_connection_count(disc: &Discriminator) -> usize {
    disc.branch_layers()
        .iter()
        .flat_map(|branch| branch.iter())
        .filter(|(name, _)| name.starts_with("conv") && *name != "conv0")
        .map(|(_, layer)| layer.connection_count())
        .sum()
}

/// The discriminator configuration whose parameter counts reproduce the
/// published multi-branch scaling table at 128x128 with 5 classes.
pub fn stargan_audit_spec(branches: usize) -> MultiBranchDiscriminatorSpec {
    MultiBranchDiscriminatorSpec {
        branches,
        base_channels: 64,
        n_layers: 6,
        num_classes: 5,
        image_side: 128,
        in_channels: 3,
        head_channels: 320,
        max_channels: 2048,
    }
}

/// Single 70x70 patch discriminator: 4x4 convs 3->64->128->256->512->1.
pub fn pix2pix_audit() -> ParamAudit {
    let chans = [3usize, 64, 128, 256, 512, 1];
    let per_layer = chans
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerCount {
            name: format!("conv{i}"),
            in_ch: w[0],
            out_ch: w[1],
            kernel: 4,
            params: 16 * w[0] * w[1] + w[1],
        })
        .collect();
    ParamAudit::from_layers(per_layer, 1)
}

#[derive(Clone, Debug)]
pub struct ScalingRow {
    pub branches: usize,
    pub total: usize,
    pub hidden_connections: usize,
    pub ratio_to_single: f64,
}

/// Build the audit discriminator for each N and tabulate totals and ratios.
pub fn audit_branch_scaling(
    spec_for: impl Fn(usize) -> MultiBranchDiscriminatorSpec,
    n_list: &[usize],
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::with_capacity(n_list.len());
    let base_total = build_audit_total(&spec_for(1))?;
    for &n in n_list {
        let spec = spec_for(n);
        spec.validate()?;
        let (total, hidden) = build_audit_counts(&spec)?;
        rows.push(ScalingRow {
            branches: n,
            total,
            hidden_connections: hidden,
            ratio_to_single: total as f64 / base_total as f64,
        });
    }
    Ok(rows)
}

fn build_audit_total(spec: &MultiBranchDiscriminatorSpec) -> Result<usize> {
    Ok(build_audit_counts(spec)?.0)
}

fn build_audit_counts(spec: &MultiBranchDiscriminatorSpec) -> Result<(usize, usize)> {
    // weights are irrelevant to counting; a fixed seed keeps this cheap and
    // deterministic
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let disc = Discriminator::build(*spec, &mut store, "d", &mut rng)?;
    let audit = count_parameters(&disc);
    debug_assert_eq!(audit.total, store.total_scalars());
    Ok((audit.total, hidden_connection_count(&disc)))
}

/// CSV with the audit table's fixed column set.
pub fn audit_csv(rows: &[(String, usize, usize, usize)]) -> String {
    let mut out = String::from("method,branches,disc_params,total_params\n");
    for (method, branches, disc_params, total_params) in rows {
        out.push_str(&format!("{method},{branches},{disc_params},{total_params}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TimingReport {
    pub iterations: usize,
    /// Mean wall-clock seconds per 1000 iterations. Absolute values are
    /// hardware-specific and not comparable across machines.
    pub mean_sec_per_1k: f64,
    pub std_sec_per_1k: f64,
}

/// Extrapolate per-step wall-clock durations to 1000-iteration units.
pub fn timing_report(step_seconds: &[f64]) -> Result<TimingReport> {
    if step_seconds.len() < 100 {
        return Err(Error::usage(format!(
            "timing report needs at least 100 iterations, got {}",
            step_seconds.len()
        )));
    }
    let n = step_seconds.len() as f64;
    let mean = step_seconds.iter().sum::<f64>() / n * 1000.0;
    let var = step_seconds
        .iter()
        .map(|&s| (s * 1000.0 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(TimingReport { iterations: step_seconds.len(), mean_sec_per_1k: mean, std_sec_per_1k: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SyntheticSpec};

    #[test]
    fn uniform_rows_score_exactly_one() {
        let t = Tensor::full(vec![8, 4], 0.25f32);
        let r = inception_score(&t, 2).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
        assert!(r.per_split.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn balanced_one_hot_scores_k() {
        let k = 3;
        let mut t = Tensor::zeros(vec![6, k]);
        for i in 0..6 {
            t.data_mut()[i * k + i % k] = 1.0;
        }
        let r = inception_score(&t, 1).unwrap();
        assert!((r.mean - k as f64).abs() < 1e-9, "score {}", r.mean);
    }

    #[test]
    fn matches_direct_kl_oracle() {
        let rows = [[0.9f32, 0.1], [0.8, 0.2], [0.1, 0.9], [0.3, 0.7]];
        let t = Tensor::from_vec(vec![4, 2], rows.concat()).unwrap();
        let r = inception_score(&t, 1).unwrap();
        // direct double loop in f64
        let marginal: Vec<f64> = (0..2)
            .map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / 4.0)
            .collect();
        let mut mean_kl = 0.0;
        for row in &rows {
            for j in 0..2 {
                let p = row[j] as f64;
                mean_kl += p * (p / marginal[j]).ln() / 4.0;
            }
        }
        assert!((r.mean - mean_kl.exp()).abs() < 1e-6);
    }

    #[test]
    fn is_bounds_and_row_permutation_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k) = (30, 4);
        let mut t = Tensor::zeros(vec![m, k]);
        for i in 0..m {
            let raw: Vec<f64> = (0..k)
                .map(|_| {
                    use rand::Rng;
                    rng.random_range(0.01..1.0)
                })
                .collect();
            let s: f64 = raw.iter().sum();
            for j in 0..k {
                t.data_mut()[i * k + j] = (raw[j] / s) as f32;
            }
        }
        let r = inception_score(&t, 1).unwrap();
        assert!(r.mean >= 1.0 - 1e-9 && r.mean <= k as f64 + 1e-9);

        // permute rows: single-split score unchanged
        let mut perm = t.clone();
        let row0: Vec<f32> = t.data()[..k].to_vec();
        let row9: Vec<f32> = t.data()[9 * k..10 * k].to_vec();
        perm.data_mut()[..k].copy_from_slice(&row9);
        perm.data_mut()[9 * k..10 * k].copy_from_slice(&row0);
        let r2 = inception_score(&perm, 1).unwrap();
        assert!((r.mean - r2.mean).abs() < 1e-9);
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let t = Tensor::from_vec(vec![1, 2], vec![0.5f32, 0.6]).unwrap();
        assert!(inception_score(&t, 1).is_err());
        assert_eq!(default_splits(499), 1);
        assert_eq!(default_splits(500), 10);
    }

    #[test]
    fn stargan_audit_reproduces_published_counts() {
        // (branches, published count in millions)
        let published = [(1usize, 45.41f64), (2, 23.06), (4, 11.89), (8, 6.30)];
        for &(n, want_m) in &published {
            let (total, _) = build_audit_counts(&stargan_audit_spec(n)).unwrap();
            let rel = (total as f64 - want_m * 1e6).abs() / (want_m * 1e6);
            assert!(rel < 0.02, "N={n}: counted {total}, published {want_m}M, off {:.2}%", rel * 100.0);
        }
        // frozen integers: any drift in the audit architecture must be loud
        assert_eq!(build_audit_counts(&stargan_audit_spec(1)).unwrap().0, 45_367_622);
        assert_eq!(build_audit_counts(&stargan_audit_spec(4)).unwrap().0, 11_874_776);
    }

    #[test]
    fn pix2pix_audit_matches_published() {
        let audit = pix2pix_audit();
        assert_eq!(audit.total, 2_764_737);
        let rel = (audit.total as f64 - 2.77e6).abs() / 2.77e6;
        assert!(rel < 0.02);
        // layer counts use the closed form
        assert_eq!(audit.per_layer[0].params, 3 * 64 * 16 + 64);
    }

    #[test]
    fn hidden_connections_scale_exactly_inverse_n() {
        let rows = audit_branch_scaling(stargan_audit_spec, &[1, 2, 4, 8, 16, 32]).unwrap();
        let base = rows[0].hidden_connections;
        for row in &rows {
            assert_eq!(row.hidden_connections, base / row.branches, "N = {}", row.branches);
        }
        // full-body ratios decrease monotonically
        for pair in rows.windows(2) {
            assert!(pair[1].ratio_to_single < pair[0].ratio_to_single);
        }
        assert!((rows[0].ratio_to_single - 1.0).abs() < 1e-12);
    }

    #[test]
    fn audit_equals_optimizer_scalars() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MultiBranchDiscriminatorSpec {
            branches: 2,
            base_channels: 16,
            n_layers: 3,
            num_classes: 3,
            image_side: 32,
            in_channels: 3,
            head_channels: 16,
            max_channels: 256,
        };
        let disc = Discriminator::build(spec, &mut store, "d", &mut rng).unwrap();
        let audit = count_parameters(&disc);
        let opt = Adam::new(&store, store.ids_with_prefix("d."), 1e-3, 0.9, 0.999).unwrap();
        let opt_scalars: usize = opt.ids().iter().map(|&id| store.get(id).numel()).sum();
        assert_eq!(audit.total, opt_scalars);
    }

    #[test]
    fn classifier_training_is_deterministic_and_accurate() {
        let mut spec = SyntheticSpec::desk_default(32);
        spec.noise = 0.0;
        let train = synth_generate(&spec, 270, 1).unwrap().dataset;
        let test = synth_generate(&spec, 30, 2).unwrap().dataset;
        let a = train_eval_classifier(&train, &test, 20, 7).unwrap();
        assert!(a.accuracy >= EVAL_CLASSIFIER_MIN_ACCURACY);
        let b = train_eval_classifier(&train, &test, 20, 7).unwrap();
        for ((_, _, ta), (_, _, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(ta.data(), tb.data(), "same seed must give identical weights");
        }
    }

    #[test]
    fn timing_report_linear_scaling() {
        let durations = vec![0.1f64; 100];
        let r = timing_report(&durations).unwrap();
        assert!((r.mean_sec_per_1k - 100.0).abs() < 1e-9);
        assert!(r.std_sec_per_1k < 1e-9);
        assert!(timing_report(&durations[..99]).is_err());
    }

    #[test]
    fn audit_csv_layout() {
        let csv = audit_csv(&[("stargan".into(), 4, 11_874_776, 11_874_776)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,branches,disc_params,total_params"));
        assert_eq!(lines.next(), Some("stargan,4,11874776,11874776"));
    }
}
