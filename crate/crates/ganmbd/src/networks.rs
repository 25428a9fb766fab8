//! Network builders and forward passes: the conditional encoder-bottleneck-
//! decoder generator, the N-branch discriminator with adversarial and
//! classification heads, the refiner and the small evaluation classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    validate_one_hot, Conv2dLayer, ConvT2dLayer, DenseLayer, InstanceNormLayer, ParamStore,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_downsample: usize,
    pub n_res_blocks: usize,
    pub num_classes: usize,
    pub image_side: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("generator needs at least 2 classes"));
        }
        let div = 1usize << self.n_downsample;
        if self.image_side % div != 0 {
            return Err(Error::config(format!(
                "image_side {} not divisible by 2^{}",
                self.image_side, self.n_downsample
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_downsample
    }
}

struct ResBlock {
    conv1: Conv2dLayer,
    norm1: InstanceNormLayer,
    conv2: Conv2dLayer,
    norm2: InstanceNormLayer,
}

impl ResBlock {
    fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.norm2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Encoder-bottleneck-decoder generator with label conditioning at the input
/// (one concatenated map from W_O) and at the last bottleneck layer
/// (per-channel affine from W_T).
pub struct Generator {
    pub spec: GeneratorSpec,
    w_o: DenseLayer,
    w_t: DenseLayer,
    first: Conv2dLayer,
    first_norm: InstanceNormLayer,
    downs: Vec<(Conv2dLayer, InstanceNormLayer)>,
    res: Vec<ResBlock>,
    ups: Vec<(ConvT2dLayer, InstanceNormLayer)>,
    last: Conv2dLayer,
}

impl Generator {
    pub fn build<S: Scalar, R: Rng>(
        spec: GeneratorSpec,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let side2 = spec.image_side * spec.image_side;
        let bneck = spec.bottleneck_channels();
        let w_o = DenseLayer::new(store, &format!("{prefix}.cond_in"), spec.num_classes, side2, rng);
        let w_t = DenseLayer::new(store, &format!("{prefix}.cond_bn"), spec.num_classes, 2 * bneck, rng);
        let first = Conv2dLayer::new(
            store,
            &format!("{prefix}.first"),
            spec.in_channels + 1,
            spec.base_channels,
            7,
            1,
            3,
            rng,
        );
        let first_norm = InstanceNormLayer::new(store, &format!("{prefix}.first_norm"), spec.base_channels);
        let mut downs = Vec::new();
        let mut ch = spec.base_channels;
        for i in 0..spec.n_downsample {
            let conv = Conv2dLayer::new(store, &format!("{prefix}.down{i}"), ch, ch * 2, 4, 2, 1, rng);
            let norm = InstanceNormLayer::new(store, &format!("{prefix}.down{i}_norm"), ch * 2);
            downs.push((conv, norm));
            ch *= 2;
        }
        let mut res = Vec::new();
        for i in 0..spec.n_res_blocks {
            res.push(ResBlock {
                conv1: Conv2dLayer::new(store, &format!("{prefix}.res{i}a"), ch, ch, 3, 1, 1, rng),
                norm1: InstanceNormLayer::new(store, &format!("{prefix}.res{i}a_norm"), ch),
                conv2: Conv2dLayer::new(store, &format!("{prefix}.res{i}b"), ch, ch, 3, 1, 1, rng),
                norm2: InstanceNormLayer::new(store, &format!("{prefix}.res{i}b_norm"), ch),
            });
        }
        let mut ups = Vec::new();
        for i in 0..spec.n_downsample {
            let conv = ConvT2dLayer::new(store, &format!("{prefix}.up{i}"), ch, ch / 2, 4, 2, 1, rng);
            let norm = InstanceNormLayer::new(store, &format!("{prefix}.up{i}_norm"), ch / 2);
            ups.push((conv, norm));
            ch /= 2;
        }
        let last = Conv2dLayer::new(store, &format!("{prefix}.last"), ch, spec.in_channels, 7, 1, 3, rng);
        Ok(Generator { spec, w_o, w_t, first, first_norm, downs, res, ups, last })
    }

    /// Dense projection of a one-hot label into the input conditional map
    /// C_O: one [N,1,H,W] channel concatenated with the image.
    pub fn label_to_input_map<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        c: Var,
    ) -> Result<Var> {
        let n = tape.shape(c)[0];
        let side = self.spec.image_side;
        let flat = self.w_o.forward(tape, store, c)?;
        tape.reshape(flat, vec![n, 1, side, side])
    }

    /// Per-channel affine modulation from the target conditional map C_T:
    /// features * (1 + gamma_c) + beta_c with (gamma_c, beta_c) = W_T c.
    pub fn label_to_bottleneck_mod<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        c: Var,
        features: Var,
    ) -> Result<Var> {
        let bneck = self.spec.bottleneck_channels();
        let proj = self.w_t.forward(tape, store, c)?;
        if tape.shape(proj)[1] != 2 * bneck {
            return Err(Error::config("bottleneck modulation size must be 2 x channels"));
        }
        let gamma = tape.slice_cols(proj, 0, bneck)?;
        let beta = tape.slice_cols(proj, bneck, 2 * bneck)?;
        tape.channel_affine(features, gamma, beta)
    }

    /// Forward pass. Translation mode: `c_in` is the source label (C_O) and
    /// `c_bn` the target label (C_T). Recycling mode passes the target label
    /// at both positions.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        c_in: Var,
        c_bn: Var,
    ) -> Result<Var> {
        let k = self.spec.num_classes;
        validate_one_hot(&tape.value(c_in), k)?;
        validate_one_hot(&tape.value(c_bn), k)?;
        let xs = tape.shape(x);
        if xs.len() != 4 || xs[2] != self.spec.image_side || xs[3] != self.spec.image_side {
            return Err(Error::usage(format!(
                "generator expects [N,{},{side},{side}] input, got {:?}",
                self.spec.in_channels,
                xs,
                side = self.spec.image_side
            )));
        }

        let map = self.label_to_input_map(tape, store, c_in)?;
        let mut h = tape.concat_channels(x, map)?;
        h = self.first.forward(tape, store, h)?;
        h = self.first_norm.forward(tape, store, h)?;
        h = tape.relu(h);
        for (conv, norm) in &self.downs {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        for block in &self.res {
            h = block.forward(tape, store, h)?;
        }
        h = self.label_to_bottleneck_mod(tape, store, c_bn, h)?;
        for (conv, norm) in &self.ups {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        h = self.last.forward(tape, store, h)?;
        Ok(tape.tanh(h))
    }
}

// ---------------------------------------------------------------------------
// Multi-branch discriminator
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiBranchDiscriminatorSpec {
    /// Number of branches N (= m in the glossary).
    pub branches: usize,
    /// Total base channel budget X; each branch starts at X/N channels.
    pub base_channels: usize,
    pub n_layers: usize,
    pub num_classes: usize,
    pub image_side: usize,
    pub in_channels: usize,
    /// Fixed width of the per-branch head stem (1x1 conv before the heads).
    pub head_channels: usize,
    /// Total-equivalent channel cap: a branch never exceeds max_channels/N.
    pub max_channels: usize,
}

impl MultiBranchDiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 || self.base_channels % self.branches != 0 {
            return Err(Error::config(format!(
                "base_channels {} must be divisible by branches {}",
                self.base_channels, self.branches
            )));
        }
        if self.branches > self.base_channels {
            return Err(Error::config("branches must not exceed base_channels"));
        }
        if self.image_side < (1 << self.n_layers) {
            return Err(Error::config(format!(
                "image_side {} too small for {} stride-2 layers",
                self.image_side, self.n_layers
            )));
        }
        if self.max_channels % self.branches != 0 {
            return Err(Error::config("max_channels must be divisible by branches"));
        }
        Ok(())
    }

    /// Channel widths of one branch body (layer outputs).
    pub fn branch_channels(&self) -> Vec<usize> {
        let base = self.base_channels / self.branches;
        let cap = self.max_channels / self.branches;
        (0..self.n_layers).map(|l| (base << l).min(cap)).collect()
    }

    /// Spatial side after the stride-2 stack.
    pub fn final_side(&self) -> usize {
        self.image_side >> self.n_layers
    }
}

/// One weak discriminator: a stride-2 conv stack (no normalization, plain
/// leaky-relu) followed by a 1x1 head stem and two heads.
pub struct Branch {
    body: Vec<Conv2dLayer>,
    stem: Conv2dLayer,
    adv: Conv2dLayer,
    cls: Conv2dLayer,
}

/// Output of one branch: patch probabilities in (0,1) and K class logits.
pub struct BranchOutput {
    pub adv: Var,
    pub cls: Var,
}

/// Branch-averaged outputs: elementwise mean adv map, mean softmax probs.
pub struct AggregateOutput {
    pub adv: Var,
    pub cls_probs: Var,
}

pub struct Discriminator {
    pub spec: MultiBranchDiscriminatorSpec,
    branches: Vec<Branch>,
}

impl Discriminator {
    pub fn build<S: Scalar, R: Rng>(
        spec: MultiBranchDiscriminatorSpec,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let widths = spec.branch_channels();
        let final_side = spec.final_side();
        let mut branches = Vec::with_capacity(spec.branches);
        for b in 0..spec.branches {
            let mut body = Vec::new();
            let mut in_ch = spec.in_channels;
            for (l, &out_ch) in widths.iter().enumerate() {
                body.push(Conv2dLayer::new(
                    store,
                    &format!("{prefix}.b{b}.conv{l}"),
                    in_ch,
                    out_ch,
                    4,
                    2,
                    1,
                    rng,
                ));
                in_ch = out_ch;
            }
            let stem = Conv2dLayer::new(store, &format!("{prefix}.b{b}.stem"), in_ch, spec.head_channels, 1, 1, 0, rng);
            let adv = Conv2dLayer::new(store, &format!("{prefix}.b{b}.adv"), spec.head_channels, 1, 3, 1, 1, rng);
            let cls = Conv2dLayer::new(
                store,
                &format!("{prefix}.b{b}.cls"),
                spec.head_channels,
                spec.num_classes,
                final_side,
                1,
                0,
                rng,
            );
            branches.push(Branch { body, stem, adv, cls });
        }
        Ok(Discriminator { spec, branches })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Every conv layer per branch, named, in forward order (body convs,
    /// then head stem, adversarial head, classification head).
    pub fn branch_layers(&self) -> Vec<Vec<(String, &Conv2dLayer)>> {
        self.branches
            .iter()
            .map(|b| {
                let mut layers: Vec<(String, &Conv2dLayer)> = b
                    .body
                    .iter()
                    .enumerate()
                    .map(|(l, conv)| (format!("conv{l}"), conv))
                    .collect();
                layers.push(("stem".to_string(), &b.stem));
                layers.push(("adv".to_string(), &b.adv));
                layers.push(("cls".to_string(), &b.cls));
                layers
            })
            .collect()
    }

    fn branch_forward<S: Scalar>(
        &self,
        branch: &Branch,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        img: Var,
    ) -> Result<BranchOutput> {
        let mut h = img;
        for conv in &branch.body {
            h = conv.forward(tape, store, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        h = branch.stem.forward(tape, store, h)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        let adv = tape.sigmoid(branch.adv.forward(tape, store, h)?);
        let cls_map = branch.cls.forward(tape, store, h)?;
        let n = tape.shape(cls_map)[0];
        let cls = tape.reshape(cls_map, vec![n, self.spec.num_classes])?;
        Ok(BranchOutput { adv, cls })
    }

    /// Run every branch on the full image and average their outputs.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        img: Var,
    ) -> Result<(Vec<BranchOutput>, AggregateOutput)> {
        let outputs: Vec<BranchOutput> = self
            .branches
            .iter()
            .map(|b| self.branch_forward(b, tape, store, img))
            .collect::<Result<_>>()?;
        let n = outputs.len() as f64;
        let mut adv_sum = outputs[0].adv;
        for o in &outputs[1..] {
            adv_sum = tape.add(adv_sum, o.adv)?;
        }
        let adv = tape.scale(adv_sum, 1.0 / n);
        let mut probs_sum = tape.softmax(outputs[0].cls)?;
        for o in &outputs[1..] {
            let p = tape.softmax(o.cls)?;
            probs_sum = tape.add(probs_sum, p)?;
        }
        let cls_probs = tape.scale(probs_sum, 1.0 / n);
        Ok((outputs, AggregateOutput { adv, cls_probs }))
    }
}

// ---------------------------------------------------------------------------
// Refiner
// ---------------------------------------------------------------------------

/// Post-processing network trained on (block-degraded, original) pairs.
/// Smaller than the generator and with encoder-decoder skip connections.
pub struct Refiner {
    pub base_channels: usize,
    pub image_side: usize,
    c1: Conv2dLayer,
    n1: InstanceNormLayer,
    c2: Conv2dLayer,
    n2: InstanceNormLayer,
    c3: Conv2dLayer,
    n3: InstanceNormLayer,
    res: Vec<ResBlock>,
    d1: ConvT2dLayer,
    dn1: InstanceNormLayer,
    f1: Conv2dLayer,
    fn1: InstanceNormLayer,
    d2: ConvT2dLayer,
    dn2: InstanceNormLayer,
    f2: Conv2dLayer,
    fn2: InstanceNormLayer,
    last: Conv2dLayer,
}

impl Refiner {
    pub fn build<S: Scalar, R: Rng>(
        base_channels: usize,
        image_side: usize,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if image_side % 4 != 0 {
            return Err(Error::config("refiner image side must be divisible by 4"));
        }
        let f = base_channels;
        let c1 = Conv2dLayer::new(store, &format!("{prefix}.c1"), 3, f, 7, 1, 3, rng);
        let n1 = InstanceNormLayer::new(store, &format!("{prefix}.n1"), f);
        let c2 = Conv2dLayer::new(store, &format!("{prefix}.c2"), f, 2 * f, 4, 2, 1, rng);
        let n2 = InstanceNormLayer::new(store, &format!("{prefix}.n2"), 2 * f);
        let c3 = Conv2dLayer::new(store, &format!("{prefix}.c3"), 2 * f, 4 * f, 4, 2, 1, rng);
        let n3 = InstanceNormLayer::new(store, &format!("{prefix}.n3"), 4 * f);
        let res = (0..2)
            .map(|i| ResBlock {
                conv1: Conv2dLayer::new(store, &format!("{prefix}.res{i}a"), 4 * f, 4 * f, 3, 1, 1, rng),
                norm1: InstanceNormLayer::new(store, &format!("{prefix}.res{i}a_norm"), 4 * f),
                conv2: Conv2dLayer::new(store, &format!("{prefix}.res{i}b"), 4 * f, 4 * f, 3, 1, 1, rng),
                norm2: InstanceNormLayer::new(store, &format!("{prefix}.res{i}b_norm"), 4 * f),
            })
            .collect();
        let d1 = ConvT2dLayer::new(store, &format!("{prefix}.d1"), 4 * f, 2 * f, 4, 2, 1, rng);
        let dn1 = InstanceNormLayer::new(store, &format!("{prefix}.dn1"), 2 * f);
        let f1 = Conv2dLayer::new(store, &format!("{prefix}.f1"), 4 * f, 2 * f, 3, 1, 1, rng);
        let fn1 = InstanceNormLayer::new(store, &format!("{prefix}.fn1"), 2 * f);
        let d2 = ConvT2dLayer::new(store, &format!("{prefix}.d2"), 2 * f, f, 4, 2, 1, rng);
        let dn2 = InstanceNormLayer::new(store, &format!("{prefix}.dn2"), f);
        let f2 = Conv2dLayer::new(store, &format!("{prefix}.f2"), 2 * f, f, 3, 1, 1, rng);
        let fn2 = InstanceNormLayer::new(store, &format!("{prefix}.fn2"), f);
        let last = Conv2dLayer::new(store, &format!("{prefix}.last"), f, 3, 7, 1, 3, rng);
        Ok(Refiner {
            base_channels, image_side,
            c1, n1, c2, n2, c3, n3, res, d1, dn1, f1, fn1, d2, dn2, f2, fn2, last,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let e1 = {
            let h = self.c1.forward(tape, store, x)?;
            let h = self.n1.forward(tape, store, h)?;
            tape.relu(h)
        };
        let e2 = {
            let h = self.c2.forward(tape, store, e1)?;
            let h = self.n2.forward(tape, store, h)?;
            tape.relu(h)
        };
        let mut h = {
            let h = self.c3.forward(tape, store, e2)?;
            let h = self.n3.forward(tape, store, h)?;
            tape.relu(h)
        };
        for block in &self.res {
            h = block.forward(tape, store, h)?;
        }
        h = self.d1.forward(tape, store, h)?;
        h = self.dn1.forward(tape, store, h)?;
        h = tape.relu(h);
        h = tape.concat_channels(h, e2)?;
        h = self.f1.forward(tape, store, h)?;
        h = self.fn1.forward(tape, store, h)?;
        h = tape.relu(h);
        h = self.d2.forward(tape, store, h)?;
        h = self.dn2.forward(tape, store, h)?;
        h = tape.relu(h);
        h = tape.concat_channels(h, e1)?;
        h = self.f2.forward(tape, store, h)?;
        h = self.fn2.forward(tape, store, h)?;
        h = tape.relu(h);
        h = self.last.forward(tape, store, h)?;
        Ok(tape.tanh(h))
    }
}

// ---------------------------------------------------------------------------
// Evaluation classifier
// ---------------------------------------------------------------------------

/// Small conv classifier standing in for the paper-scale inception network:
/// provides p(y|x) for the inception score and the target-class accuracy.
pub struct Classifier {
    pub num_classes: usize,
    pub image_side: usize,
    convs: Vec<Conv2dLayer>,
    head: DenseLayer,
}

impl Classifier {
    pub fn build<S: Scalar, R: Rng>(
        num_classes: usize,
        image_side: usize,
        base_channels: usize,
        store: &mut ParamStore<S>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if image_side % 16 != 0 {
            return Err(Error::config("classifier image side must be divisible by 16"));
        }
        let mut convs = Vec::new();
        let mut in_ch = 3;
        let mut ch = base_channels;
        for i in 0..4 {
            let std = (2.0 / (9.0 * in_ch as f64)).sqrt();
            convs.push(Conv2dLayer::with_std(store, &format!("{prefix}.conv{i}"), in_ch, ch, 3, 2, 1, std, rng));
            in_ch = ch;
            ch *= 2;
        }
        let side = image_side / 16;
        let in_f = in_ch * side * side;
        let std = (2.0 / in_f as f64).sqrt();
        let head = DenseLayer::with_std(store, &format!("{prefix}.head"), in_f, num_classes, std, rng);
        Ok(Classifier { num_classes, image_side, convs, head })
    }

    /// Class logits [N,K].
    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let shape = tape.shape(h);
        let feat: usize = shape[1..].iter().product();
        let flat = tape.reshape(h, vec![shape[0], feat])?;
        self.head.forward(tape, store, flat)
    }

    /// Softmax probabilities [N,K] for a batch of images (forward only).
    pub fn predict_probs<S: Scalar>(&self, store: &ParamStore<S>, images: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let logits = self.forward(&tape, store, x)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::nn::one_hot;

    fn desk_gen_spec() -> GeneratorSpec {
        GeneratorSpec {
            in_channels: 3,
            base_channels: 32,
            n_downsample: 2,
            n_res_blocks: 4,
            num_classes: 3,
            image_side: 64,
        }
    }

    #[test]
    fn generator_output_shape_round_trips() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::build(desk_gen_spec(), &mut store, "g", &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 64, 64]));
        let c_src = tape.constant(one_hot(&[0, 1], 3).unwrap());
        let c_tgt = tape.constant(one_hot(&[1, 2], 3).unwrap());
        let y = g.forward(&tape, &store, x, c_src, c_tgt).unwrap();
        assert_eq!(tape.shape(y), vec![2, 3, 64, 64]);
        // tanh keeps everything in [-1, 1]
        assert!(tape.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_zero_final_layer_outputs_zero() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::build(desk_gen_spec(), &mut store, "g", &mut rng).unwrap();
        // zero the final conv
        let wid = store.find("g.last.w").unwrap();
        let shape = store.get(wid).shape().to_vec();
        *store.get_mut(wid) = Tensor::zeros(shape);
        let tape = Tape::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::randn(vec![1, 3, 64, 64], 0.5, &mut rng2));
        let c = tape.constant(one_hot(&[0], 3).unwrap());
        let c2 = tape.constant(one_hot(&[1], 3).unwrap());
        let y = g.forward(&tape, &store, x, c, c2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_rejects_bad_spec_and_labels() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bad = desk_gen_spec();
        bad.image_side = 66; // not divisible by 4
        assert!(Generator::build(bad, &mut store, "g", &mut rng).is_err());

        let g = Generator::build(desk_gen_spec(), &mut store, "g2", &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 64, 64]));
        let wrong_k = tape.constant(one_hot::<f32>(&[0], 4).unwrap());
        let ok = tape.constant(one_hot::<f32>(&[0], 3).unwrap());
        assert!(g.forward(&tape, &store, x, wrong_k, ok).is_err());
    }

    #[test]
    fn input_map_is_selected_weight_row() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = desk_gen_spec();
        spec.image_side = 16;
        spec.n_downsample = 2;
        let g = Generator::build(spec, &mut store, "g", &mut rng).unwrap();
        let tape = Tape::new();
        let c = tape.constant(one_hot(&[2], 3).unwrap());
        let map = g.label_to_input_map(&tape, &store, c).unwrap();
        let got = tape.value(map);
        let w = store.get(store.find("g.cond_in.w").unwrap()).clone();
        let b = store.get(store.find("g.cond_in.b").unwrap()).clone();
        // row k of W_O plus bias, reshaped
        for j in 0..16 * 16 {
            let want = w.data()[2 * 256 + j] + b.data()[j];
            assert!((got.data()[j] - want).abs() < 1e-6);
        }
        // distinct labels give distinct maps for generic W_O
        let c0 = tape.constant(one_hot(&[0], 3).unwrap());
        let map0 = g.label_to_input_map(&tape, &store, c0).unwrap();
        assert!(tape.value(map0).max_abs_diff(&got) > 0.0);
    }

    #[test]
    fn bottleneck_mod_identity_and_beta_cases() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut spec = desk_gen_spec();
        spec.image_side = 16;
        let g = Generator::build(spec, &mut store, "g", &mut rng).unwrap();
        let bneck = spec.bottleneck_channels();

        // gamma = 0, beta = 0 -> identity
        let wid = store.find("g.cond_bn.w").unwrap();
        let ws = store.get(wid).shape().to_vec();
        *store.get_mut(wid) = Tensor::zeros(ws);
        let tape = Tape::new();
        let feats_t = Tensor::randn(vec![1, bneck, 4, 4], 1.0, &mut rng);
        let feats = tape.constant(feats_t.clone());
        let c = tape.constant(one_hot(&[1], 3).unwrap());
        let out = g.label_to_bottleneck_mod(&tape, &store, c, feats).unwrap();
        assert!(tape.value(out).max_abs_diff(&feats_t) < 1e-7);

        // gamma = -1 -> output equals beta broadcast
        let bid = store.find("g.cond_bn.b").unwrap();
        let mut bt = Tensor::zeros(vec![2 * bneck]);
        for i in 0..bneck {
            bt.data_mut()[i] = -1.0; // gamma half
            bt.data_mut()[bneck + i] = 0.25 * (i as f32 + 1.0); // beta half
        }
        *store.get_mut(bid) = bt.clone();
        let tape = Tape::new();
        let feats = tape.constant(feats_t.clone());
        let c = tape.constant(one_hot(&[1], 3).unwrap());
        let out = g.label_to_bottleneck_mod(&tape, &store, c, feats).unwrap();
        let got = tape.value(out);
        for ch in 0..bneck {
            for j in 0..16 {
                let v = got.data()[ch * 16 + j];
                assert!((v - 0.25 * (ch as f32 + 1.0)).abs() < 1e-6);
            }
        }
    }

    fn desk_disc_spec(branches: usize) -> MultiBranchDiscriminatorSpec {
        MultiBranchDiscriminatorSpec {
            branches,
            base_channels: 64,
            n_layers: 4,
            num_classes: 3,
            image_side: 64,
            in_channels: 3,
            head_channels: 64,
            max_channels: 2048,
        }
    }

    #[test]
    fn discriminator_rejects_indivisible_branching() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut spec = desk_disc_spec(5);
        spec.max_channels = 2048; // 64 % 5 != 0
        assert!(Discriminator::build(spec, &mut store, "d", &mut rng).is_err());
    }

    #[test]
    fn discriminator_outputs_and_aggregate() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Discriminator::build(desk_disc_spec(4), &mut store, "d", &mut rng).unwrap();
        let tape = Tape::new();
        let img = tape.constant(Tensor::randn(vec![2, 3, 64, 64], 0.5, &mut rng));
        let (outs, agg) = d.forward(&tape, &store, img).unwrap();
        assert_eq!(outs.len(), 4);
        for o in &outs {
            let adv = tape.value(o.adv);
            assert!(adv.data().iter().all(|&v| v > 0.0 && v < 1.0), "adv strictly in (0,1)");
            assert_eq!(tape.shape(o.cls), vec![2, 3]);
        }
        // aggregate adv equals the elementwise mean of branch adv maps
        let mut want = Tensor::zeros(tape.shape(outs[0].adv));
        for o in &outs {
            let v = tape.value(o.adv);
            for (a, b) in want.data_mut().iter_mut().zip(v.data()) {
                *a += *b / 4.0;
            }
        }
        assert!(tape.value(agg.adv).max_abs_diff(&want) < 1e-6);
        // aggregate cls probabilities sum to one
        let probs = tape.value(agg.cls_probs);
        for i in 0..2 {
            let s: f32 = probs.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_branch_aggregate_is_the_branch() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Discriminator::build(desk_disc_spec(1), &mut store, "d", &mut rng).unwrap();
        let tape = Tape::new();
        let img = tape.constant(Tensor::randn(vec![1, 3, 64, 64], 0.5, &mut rng));
        let (outs, agg) = d.forward(&tape, &store, img).unwrap();
        assert_eq!(outs.len(), 1);
        assert!(tape.value(agg.adv).max_abs_diff(&tape.value(outs[0].adv)) < 1e-7);
    }

    #[test]
    fn branch_gradient_isolation() {
        // gradient of branch i's loss w.r.t. branch j's parameters is zero
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = MultiBranchDiscriminatorSpec {
            branches: 2,
            base_channels: 8,
            n_layers: 2,
            num_classes: 2,
            image_side: 8,
            in_channels: 3,
            head_channels: 8,
            max_channels: 64,
        };
        let d = Discriminator::build(spec, &mut store, "d", &mut rng).unwrap();
        let tape = Tape::new();
        let img = tape.constant(Tensor::randn(vec![1, 3, 8, 8], 0.5, &mut rng));
        let (outs, _) = d.forward(&tape, &store, img).unwrap();
        let loss = tape.mean(outs[0].adv);
        let grads = tape.backward(loss, &store).unwrap();
        for id in store.ids_with_prefix("d.b1.") {
            assert!(grads.get(id).data().iter().all(|&v| v == 0.0), "{}", store.name(id));
        }
        // and branch 0 got a non-zero gradient somewhere
        let any_nonzero = store
            .ids_with_prefix("d.b0.")
            .iter()
            .any(|id| grads.get(*id).data().iter().any(|&v| v != 0.0));
        assert!(any_nonzero);
    }

    #[test]
    fn refiner_and_classifier_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = Refiner::build(8, 32, &mut store, "r", &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![1, 3, 32, 32], 0.5, &mut rng));
        let y = r.forward(&tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), vec![1, 3, 32, 32]);

        let c = Classifier::build(3, 64, 8, &mut store, "c", &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![2, 3, 64, 64], 0.5, &mut rng));
        let logits = c.forward(&tape, &store, x).unwrap();
        assert_eq!(tape.shape(logits), vec![2, 3]);
    }
}
