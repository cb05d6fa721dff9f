//! Output heads: per-token tag projection, utterance pooling and fusion,
//! single and multi-headed classifiers, and the cross-entropy loss.

use crate::attention::INIT_STD;
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::{softmax_rows, Tensor};

/// How the utterance-level representation is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Cross-stitched encoder: pool the fused streams, concatenate.
    Xse,
    /// Shallow fusion: pool each raw encoder output, concatenate.
    SeTe,
    /// Speech-only pooling.
    Se,
    /// Text-only pooling.
    Te,
}

impl FusionMode {
    pub fn fused_width(&self, d_model: usize) -> usize {
        match self {
            FusionMode::Xse | FusionMode::SeTe => 2 * d_model,
            FusionMode::Se | FusionMode::Te => d_model,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xse" => Ok(FusionMode::Xse),
            "se-te" => Ok(FusionMode::SeTe),
            "se" => Ok(FusionMode::Se),
            "te" => Ok(FusionMode::Te),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Xse => "xse",
            FusionMode::SeTe => "se-te",
            FusionMode::Se => "se",
            FusionMode::Te => "te",
        }
    }
}

/// Linear projection over every token of the text-side stream.
#[derive(Debug, Clone)]
pub struct TagHead {
    scope: Scope,
    pub d_model: usize,
    pub n_tags: usize,
}

#[derive(Debug, Clone)]
pub struct TagHeadCache {
    x: Tensor,
}

impl TagHead {
    pub fn init(store: &mut ParamStore, scope: &Scope, d_model: usize, n_tags: usize, rng: &mut Rng) -> Self {
        assert!(n_tags >= 2);
        store.insert(scope.name("w"), Tensor::randn(&[d_model, n_tags], INIT_STD, rng));
        store.insert(scope.name("b"), Tensor::zeros(&[n_tags]));
        TagHead {
            scope: scope.clone(),
            d_model,
            n_tags,
        }
    }

    pub fn forward(&self, store: &ParamStore, text_fused: &EncoderOutput) -> Result<(Tensor, TagHeadCache)> {
        if text_fused.seq.cols() != self.d_model {
            return Err(Error::Config(format!(
                "tag head width {} does not match stream width {}",
                self.d_model,
                text_fused.seq.cols()
            )));
        }
        let logits = text_fused
            .seq
            .matmul(store.value(&self.scope.name("w")))?
            .add_row_broadcast(store.value(&self.scope.name("b")))?;
        Ok((
            logits,
            TagHeadCache {
                x: text_fused.seq.clone(),
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &TagHeadCache, dlogits: &Tensor) -> Result<Tensor> {
        store.acc_grad(&self.scope.name("w"), &cache.x.matmul_tn(dlogits)?);
        store.acc_grad(&self.scope.name("b"), &dlogits.sum_rows());
        dlogits.matmul_nt(store.value(&self.scope.name("w")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Take the row at position 0 ([CLS]); position 0 must be real.
    Cls,
    /// Per-coordinate maximum over real positions only.
    Max,
}

#[derive(Debug, Clone)]
pub enum PoolCache {
    Cls { t: usize },
    Max { t: usize, argmax: Vec<usize> },
}

/// Pool an encoder output into a single d_model vector.
pub fn pool(enc: &EncoderOutput, mode: PoolMode) -> Result<(Tensor, PoolCache)> {
    let t = enc.len();
    let d = enc.seq.cols();
    if enc.real_len() == 0 {
        return Err(Error::Empty("pooling over no real positions"));
    }
    match mode {
        PoolMode::Cls => {
            if !enc.mask[0] {
                return Err(Error::Config("cls pooling requires position 0 real".into()));
            }
            Ok((
                Tensor::vector(enc.seq.row(0).to_vec()),
                PoolCache::Cls { t },
            ))
        }
        PoolMode::Max => {
            let mut out = vec![f64::NEG_INFINITY; d];
            let mut argmax = vec![0usize; d];
            for i in 0..t {
                if !enc.mask[i] {
                    continue;
                }
                let row = enc.seq.row(i);
                for c in 0..d {
                    if row[c] > out[c] {
                        out[c] = row[c];
                        argmax[c] = i;
                    }
                }
            }
            Ok((Tensor::vector(out), PoolCache::Max { t, argmax }))
        }
    }
}

/// Scatter a pooled-vector gradient back over the sequence.
pub fn pool_backward(cache: &PoolCache, d: &Tensor) -> Tensor {
    let width = d.numel();
    match cache {
        PoolCache::Cls { t } => {
            let mut out = Tensor::zeros(&[*t, width]);
            out.row_mut(0).copy_from_slice(d.data());
            out
        }
        PoolCache::Max { t, argmax } => {
            let mut out = Tensor::zeros(&[*t, width]);
            for (c, &row) in argmax.iter().enumerate() {
                out.data_mut()[row * width + c] += d.data()[c];
            }
            out
        }
    }
}

/// Which path shallow fusion took; callers log this for missing-modality
/// bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusePath {
    Both,
    SpeechOnly,
    TextOnly,
}

/// Concatenate pooled speech and text vectors, speech half first. When one
/// modality is absent the available vector fills both halves, keeping the
/// classifier width constant across batches.
pub fn fuse_shallow(pooled_s: Option<&Tensor>, pooled_t: Option<&Tensor>) -> Result<(Tensor, FusePath)> {
    match (pooled_s, pooled_t) {
        (Some(s), Some(t)) => {
            let mut data = Vec::with_capacity(s.numel() + t.numel());
            data.extend_from_slice(s.data());
            data.extend_from_slice(t.data());
            Ok((Tensor::vector(data), FusePath::Both))
        }
        (Some(s), None) => {
            let mut data = Vec::with_capacity(2 * s.numel());
            data.extend_from_slice(s.data());
            data.extend_from_slice(s.data());
            Ok((Tensor::vector(data), FusePath::SpeechOnly))
        }
        (None, Some(t)) => {
            let mut data = Vec::with_capacity(2 * t.numel());
            data.extend_from_slice(t.data());
            data.extend_from_slice(t.data());
            Ok((Tensor::vector(data), FusePath::TextOnly))
        }
        (None, None) => Err(Error::Empty("fuse_shallow with no modality")),
    }
}

/// Split a fused-vector gradient back into per-modality pooled grads.
pub fn fuse_shallow_backward(path: FusePath, d: &Tensor) -> (Option<Tensor>, Option<Tensor>) {
    let half = d.numel() / 2;
    let (lo, hi) = (&d.data()[..half], &d.data()[half..]);
    match path {
        FusePath::Both => (
            Some(Tensor::vector(lo.to_vec())),
            Some(Tensor::vector(hi.to_vec())),
        ),
        FusePath::SpeechOnly => {
            let sum: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| a + b).collect();
            (Some(Tensor::vector(sum)), None)
        }
        FusePath::TextOnly => {
            let sum: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| a + b).collect();
            (None, Some(Tensor::vector(sum)))
        }
    }
}

/// Utterance-level classifier head: one linear projection over the fused
/// vector. The fusion mode decides d_fused.
#[derive(Debug, Clone)]
pub struct UttHead {
    scope: Scope,
    pub mode: FusionMode,
    pub d_fused: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct UttHeadCache {
    fused: Tensor,
}

impl UttHead {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        mode: FusionMode,
        d_model: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Self {
        let d_fused = mode.fused_width(d_model);
        store.insert(scope.name("w"), Tensor::randn(&[d_fused, n_classes], INIT_STD, rng));
        store.insert(scope.name("b"), Tensor::zeros(&[n_classes]));
        UttHead {
            scope: scope.clone(),
            mode,
            d_fused,
            n_classes,
        }
    }

    pub fn forward(&self, store: &ParamStore, fused: &Tensor) -> Result<(Tensor, UttHeadCache)> {
        if fused.numel() != self.d_fused {
            return Err(Error::Config(format!(
                "fused vector width {} does not match head width {}",
                fused.numel(),
                self.d_fused
            )));
        }
        let x = Tensor::new(vec![1, self.d_fused], fused.data().to_vec())?;
        let logits = x
            .matmul(store.value(&self.scope.name("w")))?
            .add_row_broadcast(store.value(&self.scope.name("b")))?;
        Ok((
            Tensor::vector(logits.into_data()),
            UttHeadCache { fused: fused.clone() },
        ))
    }

    /// Returns the gradient on the fused vector.
    pub fn backward(&self, store: &mut ParamStore, cache: &UttHeadCache, dlogits: &Tensor) -> Result<Tensor> {
        let x = Tensor::new(vec![1, self.d_fused], cache.fused.data().to_vec())?;
        let dl = Tensor::new(vec![1, self.n_classes], dlogits.data().to_vec())?;
        store.acc_grad(&self.scope.name("w"), &x.matmul_tn(&dl)?);
        store.acc_grad(&self.scope.name("b"), &dl.sum_rows());
        let dx = dl.matmul_nt(store.value(&self.scope.name("w")))?;
        Ok(Tensor::vector(dx.into_data()))
    }
}

/// Two projections reading one shared fused vector: intent and entity.
#[derive(Debug, Clone)]
pub struct MultiHeadedClassifier {
    pub intent: UttHead,
    pub entity: UttHead,
}

impl MultiHeadedClassifier {
    pub fn init(
        store: &mut ParamStore,
        scope: &Scope,
        mode: FusionMode,
        d_model: usize,
        n_intents: usize,
        n_entities: usize,
        rng: &mut Rng,
    ) -> Self {
        MultiHeadedClassifier {
            intent: UttHead::init(store, &scope.sub("intent"), mode, d_model, n_intents, rng),
            entity: UttHead::init(store, &scope.sub("entity"), mode, d_model, n_entities, rng),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        fused: &Tensor,
    ) -> Result<((Tensor, Tensor), (UttHeadCache, UttHeadCache))> {
        let (li, ci) = self.intent.forward(store, fused)?;
        let (le, ce) = self.entity.forward(store, fused)?;
        Ok(((li, le), (ci, ce)))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        caches: &(UttHeadCache, UttHeadCache),
        d_intent: &Tensor,
        d_entity: &Tensor,
    ) -> Result<Tensor> {
        let mut d = self.intent.backward(store, &caches.0, d_intent)?;
        d.add_assign(&self.entity.backward(store, &caches.1, d_entity)?);
        Ok(d)
    }
}

/// Mean negative log softmax probability over non-ignored rows.
/// `ignore[i] = true` drops row i from the loss.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], ignore: Option<&[bool]>) -> Result<f64> {
    cross_entropy_with_grad(logits, labels, ignore).map(|(loss, _)| loss)
}

/// Cross-entropy plus dL/dlogits: (softmax - onehot) / kept on kept rows.
pub fn cross_entropy_with_grad(
    logits: &Tensor,
    labels: &[usize],
    ignore: Option<&[bool]>,
) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    if let Some(ig) = ignore {
        if ig.len() != n {
            return Err(Error::LengthMismatch {
                left: ig.len(),
                right: n,
            });
        }
    }
    let kept: Vec<usize> = (0..n)
        .filter(|&i| ignore.map_or(true, |ig| !ig[i]))
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("cross_entropy with all rows ignored"));
    }
    for &i in &kept {
        if labels[i] >= c {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes at row {}",
                labels[i], c, i
            )));
        }
    }

    let probs = softmax_rows(logits);
    let k = kept.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(&[n, c]);
    for &i in &kept {
        // log prob via the stable route: ln(softmax) of the stored prob
        loss += -(probs.at2(i, labels[i]).max(1e-300)).ln() / k;
        for j in 0..c {
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            dlogits.set2(i, j, (probs.at2(i, j) - onehot) / k);
        }
    }
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rng() -> Rng {
        Rng::new(0x4EAD5)
    }

    fn enc(seq: Tensor) -> EncoderOutput {
        let mask = vec![true; seq.rows()];
        EncoderOutput { seq, mask }
    }

    #[test]
    fn zero_weight_tag_head_emits_bias() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = TagHead::init(&mut store, &Scope::root("tag"), 4, 3, &mut r);
        store.value_mut("tag.w").fill(0.0);
        *store.value_mut("tag.b") = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let x = enc(Tensor::randn(&[5, 4], 1.0, &mut r));
        let (logits, _) = head.forward(&store, &x).unwrap();
        for i in 0..5 {
            assert_eq!(logits.row(i), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn tag_argmax_in_range() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = TagHead::init(&mut store, &Scope::root("tag"), 4, 3, &mut r);
        let x = enc(Tensor::randn(&[7, 4], 1.0, &mut r));
        let (logits, _) = head.forward(&store, &x).unwrap();
        for i in 0..7 {
            let arg = logits
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!(arg < 3);
        }
    }

    #[test]
    fn tag_head_width_mismatch_is_config_error() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = TagHead::init(&mut store, &Scope::root("tag"), 4, 3, &mut r);
        let x = enc(Tensor::randn(&[2, 6], 1.0, &mut r));
        assert!(matches!(head.forward(&store, &x), Err(Error::Config(_))));
    }

    #[test]
    fn tag_head_gradients_match_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = TagHead::init(&mut store, &Scope::root("tag"), 3, 2, &mut r);
        store.randomize(0.5, &mut r);
        let x = enc(Tensor::randn(&[4, 3], 1.0, &mut r));
        let labels = vec![0usize, 1, 0, 1];

        store.zero_grads();
        let (logits, cache) = head.forward(&store, &x).unwrap();
        let (_, dlogits) = cross_entropy_with_grad(&logits, &labels, None).unwrap();
        head.backward(&mut store, &cache, &dlogits).unwrap();

        let head2 = head.clone();
        let (x2, labels2) = (x.clone(), labels.clone());
        let report = crate::grad_check::grad_check(
            move |p: &ParamStore| {
                let (logits, _) = head2.forward(p, &x2)?;
                cross_entropy(&logits, &labels2, None)
            },
            &mut store,
            &crate::grad_check::GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.all_pass(), "worst: {:?}", report.worst());
    }

    #[test]
    fn pool_single_row_both_modes() {
        let e = enc(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let (cls, _) = pool(&e, PoolMode::Cls).unwrap();
        let (max, _) = pool(&e, PoolMode::Max).unwrap();
        assert_eq!(cls.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(max.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn max_pool_hand_case() {
        let e = enc(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let (max, _) = pool(&e, PoolMode::Max).unwrap();
        assert_eq!(max.data(), &[3.0, 5.0]);
    }

    #[test]
    fn max_pool_ignores_garbage_in_padding() {
        let seq = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![1e9, 1e9]]);
        let masked = EncoderOutput {
            seq: seq.clone(),
            mask: vec![true, true, false],
        };
        let clean = enc(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let (a, _) = pool(&masked, PoolMode::Max).unwrap();
        let (b, _) = pool(&clean, PoolMode::Max).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cls_pool_requires_real_position_zero() {
        let e = EncoderOutput {
            seq: Tensor::from_rows(&[vec![1.0], vec![2.0]]),
            mask: vec![false, true],
        };
        assert!(pool(&e, PoolMode::Cls).is_err());
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let e = enc(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let (_, cache) = pool(&e, PoolMode::Max).unwrap();
        let d = pool_backward(&cache, &Tensor::vector(vec![10.0, 20.0]));
        assert_eq!(d.row(0), &[0.0, 20.0]);
        assert_eq!(d.row(1), &[10.0, 0.0]);
    }

    #[test]
    fn fuse_both_concatenates_speech_first() {
        let s = Tensor::vector(vec![1.0, 2.0]);
        let t = Tensor::vector(vec![3.0, 4.0]);
        let (fused, path) = fuse_shallow(Some(&s), Some(&t)).unwrap();
        assert_eq!(fused.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(path, FusePath::Both);
        // swapping roles changes the output: the ordering is a contract
        let (swapped, _) = fuse_shallow(Some(&t), Some(&s)).unwrap();
        assert_ne!(fused.data(), swapped.data());
    }

    #[test]
    fn fuse_text_only_duplicates_both_halves() {
        let t = Tensor::vector(vec![3.0, 4.0]);
        let (fused, path) = fuse_shallow(None, Some(&t)).unwrap();
        assert_eq!(fused.data(), &[3.0, 4.0, 3.0, 4.0]);
        assert_eq!(path, FusePath::TextOnly);
    }

    #[test]
    fn fuse_neither_errors() {
        assert!(fuse_shallow(None, None).is_err());
    }

    #[test]
    fn fuse_is_deterministic_bitwise() {
        let s = Tensor::vector(vec![0.1, -0.7]);
        let t = Tensor::vector(vec![2.5, 1e-13]);
        let (a, _) = fuse_shallow(Some(&s), Some(&t)).unwrap();
        let (b, _) = fuse_shallow(Some(&s), Some(&t)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fuse_backward_sums_halves_for_single_modality() {
        let d = Tensor::vector(vec![1.0, 2.0, 10.0, 20.0]);
        let (ds, dt) = fuse_shallow_backward(FusePath::TextOnly, &d);
        assert!(ds.is_none());
        assert_eq!(dt.unwrap().data(), &[11.0, 22.0]);
        let (ds, dt) = fuse_shallow_backward(FusePath::Both, &d);
        assert_eq!(ds.unwrap().data(), &[1.0, 2.0]);
        assert_eq!(dt.unwrap().data(), &[10.0, 20.0]);
    }

    #[test]
    fn zero_weight_utt_head_emits_bias() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = UttHead::init(&mut store, &Scope::root("utt"), FusionMode::Te, 3, 4, &mut r);
        store.value_mut("utt.w").fill(0.0);
        *store.value_mut("utt.b") = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let (logits, _) = head
            .forward(&store, &Tensor::vector(vec![9.0, -9.0, 0.5]))
            .unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn xse_and_sete_heads_have_distinct_parameters() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let xse = UttHead::init(&mut store, &Scope::root("xse"), FusionMode::Xse, 3, 4, &mut r);
        let sete = UttHead::init(&mut store, &Scope::root("sete"), FusionMode::SeTe, 3, 4, &mut r);
        let fused = Tensor::randn(&[6], 1.0, &mut r);
        let (a, _) = xse.forward(&store, &fused).unwrap();
        let (b, _) = sete.forward(&store, &fused).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn utt_head_rejects_width_mismatch() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = UttHead::init(&mut store, &Scope::root("utt"), FusionMode::Xse, 3, 4, &mut r);
        let res = head.forward(&store, &Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn multi_headed_joint_accuracy_hand_case() {
        // 3 samples, exactly one has both heads correct -> joint 1/3
        let mut r = rng();
        let mut store = ParamStore::new();
        let clf = MultiHeadedClassifier::init(
            &mut store,
            &Scope::root("mh"),
            FusionMode::Te,
            2,
            2,
            2,
            &mut r,
        );
        // identity-ish weights so the fused vector picks the argmax directly
        *store.value_mut("mh.intent.w") = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        *store.value_mut("mh.entity.w") = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);

        let gold = [(0usize, 0usize), (1, 1), (0, 1)];
        let inputs = [
            Tensor::vector(vec![2.0, 0.0]), // intent 0, entity 1 -> intent ok, entity wrong
            Tensor::vector(vec![0.0, 2.0]), // intent 1, entity 0 -> intent ok, entity wrong
            Tensor::vector(vec![2.0, 0.0]), // intent 0, entity 1 -> both correct
        ];
        let mut pred = Vec::new();
        for x in &inputs {
            let ((li, le), _) = clf.forward(&store, x).unwrap();
            let argmax = |t: &Tensor| {
                t.data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0
            };
            pred.push((argmax(&li), argmax(&le)));
        }
        let joint = pred
            .iter()
            .zip(gold.iter())
            .filter(|(p, g)| p == g)
            .count() as f64
            / 3.0;
        assert!((joint - 1.0 / 3.0).abs() < 1e-12, "pred {pred:?}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let logits = Tensor::zeros(&[2, 4]);
        let loss = cross_entropy(&logits, &[1, 3], None).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let mut logits = Tensor::zeros(&[1, 3]);
        logits.set2(0, 2, 100.0);
        let loss = cross_entropy(&logits, &[2], None).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_brute_force_oracle() {
        let mut r = rng();
        let logits = Tensor::randn(&[5, 3], 2.0, &mut r);
        let labels = [0usize, 2, 1, 1, 0];
        let loss = cross_entropy(&logits, &labels, None).unwrap();

        // brute force: direct probability computation per row
        let mut expect = 0.0;
        for i in 0..5 {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|&v| v.exp()).sum();
            let p = row[labels[i]].exp() / denom;
            expect += -p.ln() / 5.0;
        }
        assert!((loss - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let logits = Tensor::zeros(&[2, 3]);
        let res = cross_entropy(&logits, &[0, 1], Some(&[true, true]));
        assert!(matches!(res, Err(Error::Empty(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut r = rng();
        let logits = Tensor::randn(&[3, 4], 1.0, &mut r);
        let labels = [2usize, 0, 3];
        let ignore = [false, true, false];
        let (_, grad) = cross_entropy_with_grad(&logits, &labels, Some(&ignore)).unwrap();

        let h = 1e-6;
        for idx in 0..logits.numel() {
            let mut lp = logits.clone();
            lp.data_mut()[idx] += h;
            let fp = cross_entropy(&lp, &labels, Some(&ignore)).unwrap();
            let mut lm = logits.clone();
            lm.data_mut()[idx] -= h;
            let fm = cross_entropy(&lm, &labels, Some(&ignore)).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad.data()[idx] - fd).abs() < 1e-8);
        }
        // ignored row carries zero gradient
        assert!(grad.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let mut r = rng();
        for _ in 0..20 {
            let logits = Tensor::randn(&[4, 5], 3.0, &mut r);
            let labels: Vec<usize> = (0..4).map(|_| r.below(5)).collect();
            assert!(cross_entropy(&logits, &labels, None).unwrap() >= 0.0);
        }
    }
}
