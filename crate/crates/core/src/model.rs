//! The full network: truncated VGG-style backbone, pyramid feature
//! extractor, density classifier, two density-aware decoders and the final
//! attention fusion.
//!
//! All maps produced by the decoders live at the backbone's output stride
//! (8 with the default four stages).

use image::RgbImage;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Csse;
use crate::config::PdaNetConfig;
use crate::data_io::DensityMap;
use crate::density_gt::DensityClass;
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

const IMAGE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGE_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Normalized `[3, H, W]` input tensor.
pub fn image_tensor<T: Scalar>(image: &RgbImage) -> ArrayD<T> {
    let (w, h) = image.dimensions();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[3, h as usize, w as usize]));
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            let v = (px[c] as f64 / 255.0 - IMAGE_MEAN[c]) / IMAGE_STD[c];
            out[[c, y as usize, x as usize]] = T::lit(v);
        }
    }
    out
}

/// 1×1 reduction followed by parallel 1×1 and dilated 3×3 convolutions
/// whose outputs are summed.
#[derive(Debug, Clone)]
struct ConvModule {
    reduce: Conv,
    point: Conv,
    dilated: Conv,
}

impl ConvModule {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduced: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            reduce: Conv::new(store, &format!("{name}.reduce"), channels, reduced, 1, 1, rng),
            point: Conv::new(store, &format!("{name}.conv1"), reduced, channels, 1, 1, rng),
            dilated: Conv::new(store, &format!("{name}.conv3"), reduced, channels, 3, dilation, rng),
        }
    }

    fn forward<T: Scalar>(&self, b: &Binding<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.reduce.forward(b, x)?.relu();
        self.point.forward(b, &r)?.add(&self.dilated.forward(b, &r)?)
    }

    fn params(&self) -> Vec<ParamId> {
        [&self.reduce, &self.point, &self.dilated].iter().flat_map(|c| c.params()).collect()
    }
}

/// One decoder layer: 1×1 reduction, dilated 3×3, rectifier, CSSE.
#[derive(Debug, Clone)]
struct DadLayer {
    reduce: Conv,
    dilated: Conv,
    attention: Csse,
}

impl DadLayer {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        reduced: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            reduce: Conv::new(store, &format!("{name}.reduce"), in_ch, reduced, 1, 1, rng),
            dilated: Conv::new(store, &format!("{name}.dilated"), reduced, out_ch, 3, dilation, rng),
            attention: Csse::new(store, &format!("{name}.att"), out_ch, rng),
        }
    }

    fn forward<T: Scalar>(&self, b: &Binding<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.reduce.forward(b, x)?;
        let y = self.dilated.forward(b, &r)?.relu();
        self.attention.forward(b, &y)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<_> = self.reduce.params().into_iter().chain(self.dilated.params()).collect();
        p.extend(self.attention.params());
        p
    }
}

/// Two decoder layers and a rectified 1×1 density head.
#[derive(Debug, Clone)]
struct Branch {
    layers: [DadLayer; 2],
    head: Conv,
}

impl Branch {
    fn forward<T: Scalar>(&self, b: &Binding<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let feat = self.layers[1].forward(b, &self.layers[0].forward(b, x)?)?;
        let dm = self.head.forward(b, &feat)?.relu();
        Ok((feat, dm))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<_> = self.layers.iter().flat_map(DadLayer::params).collect();
        p.extend(self.head.params());
        p
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    shared: [DadLayer; 2],
    dense: Branch,
}

/// Layer layout; holds parameter handles only, so one architecture can be
/// bound to stores of different precision.
#[derive(Debug, Clone)]
struct Architecture {
    backbone: Vec<Vec<Conv>>,
    backbone_attention: Csse,
    pfe_context: ConvModule,
    pfe_fuse: Conv,
    pfe_gate: ConvModule,
    pfe_attention: Csse,
    classifier: Conv,
    sparse_branch: Branch,
    decoders: [Decoder; 2],
    fusion_head: Conv,
}

/// Intermediate pyramid features.
#[derive(Debug, Clone)]
pub struct PfeState<T: Scalar> {
    pub contexts: Vec<Tensor<T>>,
    pub fused: Tensor<T>,
    pub attended: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DadOutput<T: Scalar> {
    pub feat_s: Tensor<T>,
    pub feat_d: Tensor<T>,
    pub dm_s: Tensor<T>,
    pub dm_d: Tensor<T>,
}

/// Graph-level result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T: Scalar> {
    pub prob: Tensor<T>,
    pub dm_sparse: Tensor<T>,
    pub dm_dense: Tensor<T>,
    pub dm_final: Tensor<T>,
    pub routed: DensityClass,
}

/// Detached model output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub prob: f64,
    pub dm_sparse: DensityMap,
    pub dm_dense: DensityMap,
    pub dm_final: DensityMap,
    pub routed_branch: DensityClass,
}

/// Routing rule at inference: dense iff `prob >= 0.5`.
pub fn route(prob: f64) -> DensityClass {
    if prob >= 0.5 {
        DensityClass::Dense
    } else {
        DensityClass::Sparse
    }
}

fn to_density<T: Scalar>(t: &Tensor<T>, stride: u32) -> DensityMap {
    let v = t.value();
    let plane = v.index_axis(Axis(0), 0);
    let values = Array2::from_shape_fn((plane.shape()[0], plane.shape()[1]), |(i, j)| {
        plane[[i, j]].to_f32().unwrap_or(f32::NAN)
    });
    DensityMap::new(values, stride)
}

impl<T: Scalar> ForwardPass<T> {
    pub fn detach(&self, stride: u32) -> ModelOutput {
        ModelOutput {
            prob: self.prob.item().to_f64().unwrap(),
            dm_sparse: to_density(&self.dm_sparse, stride),
            dm_dense: to_density(&self.dm_dense, stride),
            dm_final: to_density(&self.dm_final, stride),
            routed_branch: self.routed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PdaNet<T: Scalar> {
    config: PdaNetConfig,
    params: ParamStore<T>,
    arch: Architecture,
}

impl<T: Scalar> PdaNet<T> {
    /// Builds a randomly initialized network; the same config (including
    /// `seed`) always yields identical parameters.
    pub fn new(config: PdaNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let dil = cfg.dilation_rate;

        let mut in_ch = 3;
        let mut backbone = Vec::new();
        for (s, stage) in cfg.backbone_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for (l, &width) in stage.iter().enumerate() {
                let out = cfg.width(width);
                convs.push(Conv::new(&mut store, &format!("backbone.{s}.{l}"), in_ch, out, 3, 1, &mut rng));
                in_ch = out;
            }
            backbone.push(convs);
        }
        let feat = cfg.feature_channels();
        let reduced = cfg.width(cfg.pfe_reduced_channels);
        let backbone_attention = Csse::new(&mut store, "backbone.att", feat, &mut rng);

        let pfe_context = ConvModule::new(&mut store, "pfe.context", feat, reduced, dil, &mut rng);
        let n_p = cfg.pfe_scales.len() + 1;
        let pfe_fuse = Conv::new(&mut store, "pfe.fuse", n_p * feat, feat, 1, 1, &mut rng);
        let pfe_gate = ConvModule::new(&mut store, "pfe.gate", feat, reduced, dil, &mut rng);
        let pfe_attention = Csse::new(&mut store, "pfe.att", feat, &mut rng);
        let classifier = Conv::new(&mut store, "classifier.fc", feat, 1, 1, 1, &mut rng);

        let widths: Vec<usize> = cfg.dad_channels[..4].iter().map(|&c| cfg.width(c)).collect();
        let head_ch = cfg.dad_channels[4];
        let decoder_shared = |store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng| {
            [
                DadLayer::new(store, &format!("{name}.l1"), feat, widths[0], reduced, dil, rng),
                DadLayer::new(store, &format!("{name}.l2"), widths[0], widths[1], reduced, dil, rng),
            ]
        };
        let branch = |store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng| Branch {
            layers: [
                DadLayer::new(store, &format!("{name}.l3"), widths[1], widths[2], reduced, dil, rng),
                DadLayer::new(store, &format!("{name}.l4"), widths[2], widths[3], reduced, dil, rng),
            ],
            head: Conv::new(store, &format!("{name}.head"), widths[3], head_ch, 1, 1, rng),
        };
        let sparse_branch = branch(&mut store, "dad.sparse_branch", &mut rng);
        let decoders = [
            Decoder {
                shared: decoder_shared(&mut store, "dad_sparse.shared", &mut rng),
                dense: branch(&mut store, "dad_sparse.dense_branch", &mut rng),
            },
            Decoder {
                shared: decoder_shared(&mut store, "dad_dense.shared", &mut rng),
                dense: branch(&mut store, "dad_dense.dense_branch", &mut rng),
            },
        ];
        let fusion_head = Conv::new(&mut store, "fusion.head", widths[3], head_ch, 1, 1, &mut rng);

        Ok(Self {
            config,
            params: store,
            arch: Architecture {
                backbone,
                backbone_attention,
                pfe_context,
                pfe_fuse,
                pfe_gate,
                pfe_attention,
                classifier,
                sparse_branch,
                decoders,
                fusion_head,
            },
        })
    }

    pub fn config(&self) -> &PdaNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> PdaNet<U> {
        PdaNet {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    pub fn stride(&self) -> usize {
        self.config.output_stride()
    }

    /// Parameters of the given decoder's own dense branch.
    pub fn dense_branch_params(&self, which: DensityClass) -> Vec<ParamId> {
        self.arch.decoders[which as usize].dense.params()
    }

    /// Parameters of the sparse branch used by both decoders.
    pub fn sparse_branch_params(&self) -> Vec<ParamId> {
        self.arch.sparse_branch.params()
    }

    /// Parameters of the given decoder's two shared layers.
    pub fn decoder_shared_params(&self, which: DensityClass) -> Vec<ParamId> {
        self.arch.decoders[which as usize].shared.iter().flat_map(DadLayer::params).collect()
    }

    /// Parameters of the pyramid context module applied at every scale.
    pub fn pfe_context_params(&self) -> Vec<ParamId> {
        self.arch.pfe_context.params()
    }

    /// VGG-style front end: 3×3 convolutions with rectifiers and a 2×2
    /// max-pool between stages.
    pub fn backbone_forward(&self, b: &Binding<'_, T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = match *image.shape() {
            [3, h, w] => (h, w),
            ref other => return Err(Error::Shape(format!("image tensor must be [3, H, W], got {other:?}"))),
        };
        let stride = self.stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the backbone stride {stride}"
            )));
        }
        let mut x = image.clone();
        for (s, stage) in self.arch.backbone.iter().enumerate() {
            if s > 0 {
                x = x.max_pool2()?;
            }
            for conv in stage {
                x = conv.forward(b, &x)?.relu();
            }
        }
        Ok(x)
    }

    /// One pyramid context map: pool by `scale`, run the shared module,
    /// upsample back to the input's spatial size.
    pub fn pfe_context(&self, b: &Binding<'_, T>, f: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
        let (h, w) = spatial(f)?;
        if scale < 1 || h < scale || w < scale {
            return Err(Error::Shape(format!("pyramid scale {scale} exceeds the {h}x{w} feature map")));
        }
        let pooled = f.avg_pool(h / scale, w / scale)?;
        self.arch.pfe_context.forward(b, &pooled)?.relu().upsample_bilinear(h, w)
    }

    /// Concatenates `[f, contexts...]` and projects back to `f`'s width.
    pub fn pfe_fuse(&self, b: &Binding<'_, T>, f: &Tensor<T>, contexts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if contexts.is_empty() {
            return Err(Error::InvalidArgument("pyramid fusion needs at least one context map".into()));
        }
        if contexts.len() + 1 != self.config.pfe_scales.len() + 1 {
            return Err(Error::Shape(format!(
                "expected {} context maps, got {}",
                self.config.pfe_scales.len(),
                contexts.len()
            )));
        }
        for c in contexts {
            if c.shape() != f.shape() {
                return Err(Error::Shape(format!("context {:?} vs features {:?}", c.shape(), f.shape())));
            }
        }
        let mut parts = Vec::with_capacity(contexts.len() + 1);
        parts.push(f.clone());
        parts.extend_from_slice(contexts);
        Ok(self.arch.pfe_fuse.forward(b, &Tensor::concat(&parts)?)?.relu())
    }

    /// Max of a pooled-gate branch and a CSSE branch.
    pub fn pfe_attention(&self, b: &Binding<'_, T>, fp: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = spatial(fp)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("pyramid attention needs sides divisible by 4, got {h}x{w}")));
        }
        let pooled = fp.avg_pool(h / 4, w / 4)?;
        let gate = self.arch.pfe_gate.forward(b, &pooled)?.upsample_bilinear(h, w)?.sigmoid();
        let a1 = fp.mul(&gate)?;
        let a2 = self.arch.pfe_attention.forward(b, fp)?;
        a1.maximum(&a2)
    }

    pub fn pfe_forward(&self, b: &Binding<'_, T>, f: &Tensor<T>) -> Result<PfeState<T>> {
        let contexts = self
            .config
            .pfe_scales
            .iter()
            .map(|&s| self.pfe_context(b, f, s))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.pfe_fuse(b, f, &contexts)?;
        let attended = self.pfe_attention(b, &fused)?;
        Ok(PfeState {
            contexts,
            fused,
            attended,
        })
    }

    /// Dense-scene probability as a 0-d-like `[1, 1, 1]` tensor.
    pub fn classify_density(&self, b: &Binding<'_, T>, f_out: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.arch.classifier.forward(b, &f_out.global_avg_pool()?)?.sigmoid())
    }

    /// Runs the selected decoder. Both decoders share the sparse branch.
    pub fn dad_forward(&self, b: &Binding<'_, T>, f_out: &Tensor<T>, which: DensityClass) -> Result<DadOutput<T>> {
        let feat = self.config.feature_channels();
        if f_out.shape().first() != Some(&feat) {
            return Err(Error::Shape(format!(
                "decoder expects {feat} channels, got {:?}",
                f_out.shape()
            )));
        }
        let decoder = &self.arch.decoders[which as usize];
        let x = decoder.shared[1].forward(b, &decoder.shared[0].forward(b, f_out)?)?;
        let (feat_s, dm_s) = self.arch.sparse_branch.forward(b, &x)?;
        let (feat_d, dm_d) = decoder.dense.forward(b, &x)?;
        Ok(DadOutput {
            feat_s,
            feat_d,
            dm_s,
            dm_d,
        })
    }

    /// `F_sum ⊙ σ(F_sum)` with `F_sum = feat_s + feat_d`, then a rectified
    /// 1×1 head.
    pub fn fuse_final(&self, b: &Binding<'_, T>, feat_s: &Tensor<T>, feat_d: &Tensor<T>) -> Result<Tensor<T>> {
        let sum = feat_s.add(feat_d)?;
        let fused = sum.mul(&sum.sigmoid())?;
        Ok(self.arch.fusion_head.forward(b, &fused)?.relu())
    }

    /// Full pipeline. With `teacher` set, the decoder is chosen by the
    /// label; otherwise by the classifier (`prob >= 0.5` is dense).
    pub fn forward(&self, b: &Binding<'_, T>, image: &Tensor<T>, teacher: Option<DensityClass>) -> Result<ForwardPass<T>> {
        let trunk = self.trunk_forward(b, image)?;
        let routed = teacher.unwrap_or_else(|| route(trunk.prob.item().to_f64().unwrap()));
        self.decode(b, &trunk, routed)
    }

    /// Shared encoder work once, then one decode per requested route.
    pub fn forward_routes(&self, b: &Binding<'_, T>, image: &Tensor<T>, routes: &[DensityClass]) -> Result<Vec<ForwardPass<T>>> {
        let trunk = self.trunk_forward(b, image)?;
        routes.iter().map(|&r| self.decode(b, &trunk, r)).collect()
    }

    fn trunk_forward(&self, b: &Binding<'_, T>, image: &Tensor<T>) -> Result<Trunk<T>> {
        let (h, w) = spatial(image)?;
        let multiple = self.config.input_multiple();
        let min_side = self.config.min_input_side();
        if h % multiple != 0 || w % multiple != 0 || h < min_side || w < min_side {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have sides divisible by {multiple} and at least {min_side}"
            )));
        }
        let mut f = self.backbone_forward(b, image)?;
        if self.config.backbone_post_attention {
            f = self.arch.backbone_attention.forward(b, &f)?;
        }
        let attended = self.pfe_forward(b, &f)?.attended;
        let prob = self.classify_density(b, &attended)?;
        Ok(Trunk { attended, prob })
    }

    fn decode(&self, b: &Binding<'_, T>, trunk: &Trunk<T>, routed: DensityClass) -> Result<ForwardPass<T>> {
        let dad = self.dad_forward(b, &trunk.attended, routed)?;
        let dm_final = self.fuse_final(b, &dad.feat_s, &dad.feat_d)?;
        Ok(ForwardPass {
            prob: trunk.prob.clone(),
            dm_sparse: dad.dm_s,
            dm_dense: dad.dm_d,
            dm_final,
            routed,
        })
    }

    /// Inference on an image whose sides are already legal.
    pub fn predict(&self, image: &RgbImage) -> Result<ModelOutput> {
        let b = Binding::frozen(&self.params);
        let x = Tensor::constant(image_tensor::<T>(image));
        let pass = self.forward(&b, &x, None)?;
        Ok(pass.detach(self.stride() as u32))
    }
}

struct Trunk<T: Scalar> {
    attended: Tensor<T>,
    prob: Tensor<T>,
}

fn spatial<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [_, h, w] => Ok((h, w)),
        ref other => Err(Error::Shape(format!("expected [C, H, W], got {other:?}"))),
    }
}
