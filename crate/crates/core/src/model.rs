//! Detection backbone, heads and the combined parameter set.
//!
//! The backbone is described as data ([`Layer`] lists) so that parameter
//! initialization, the forward pass and the receptive-field computation all
//! read the same definition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backproject::{init_encoder, EncoderConfig};
use crate::detect::{init_classifier, init_rpn, AnchorSet, ClassifierDims, RpnDims};
use crate::error::{Error, Result};
use crate::mask::{init_mask_head, MaskDims};
use crate::nn::{Bound, ConvGeom, Init, ParamStore, Real, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Feed back-projected color features into the 3D networks.
    pub use_color: bool,
    /// Base channel width; the desk default is 8 (1/8 of the original).
    pub width: usize,
    pub encoder: EncoderConfig,
    pub anchors: AnchorSet,
    /// Width of the full-resolution mask network.
    pub mask_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            use_color: true,
            width: 8,
            encoder: EncoderConfig::default(),
            anchors: AnchorSet {
                small: vec![[5.0, 5.0, 5.0], [7.0, 7.0, 6.0]],
                large: vec![[7.0, 7.0, 11.0], [11.0, 11.0, 5.0], [12.0, 6.0, 8.0]],
                stride: 4,
            },
            mask_width: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.width < 2 || self.width % 2 != 0 || self.mask_width == 0 {
            return Err(Error::Invalid(format!(
                "model needs classes ≥ 1 and an even width ≥ 2 (got {} classes, width {})",
                self.num_classes, self.width
            )));
        }
        if self.anchors.stride != STRIDE || self.anchors.small.is_empty() || self.anchors.large.is_empty() {
            return Err(Error::Invalid(format!("anchors need stride {STRIDE} and both levels populated")));
        }
        Ok(())
    }

    pub fn rpn_dims(&self) -> RpnDims {
        RpnDims {
            in_channels: 2 * self.width,
            hidden: 4 * self.width,
        }
    }

    pub fn classifier_dims(&self) -> ClassifierDims {
        ClassifierDims {
            in_features: 2 * self.width * ROI_BINS.iter().product::<usize>(),
            hidden: [4 * self.width, 4 * self.width, 2 * self.width],
            num_classes: self.num_classes,
        }
    }

    pub fn mask_dims(&self) -> MaskDims {
        MaskDims {
            color_channels: self.encoder.out_channels,
            width: self.mask_width,
            num_classes: self.num_classes,
            use_color: self.use_color,
        }
    }
}

/// Spatial reduction of the detection feature maps.
pub const STRIDE: usize = 4;
pub const ROI_BINS: [usize; 3] = [4, 4, 4];

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { name: String, cin: usize, cout: usize, k: usize, s: usize, p: usize },
    /// 1×1 reduce, 3×3, 1×1 expand, identity skip, ReLU after the sum.
    Bottleneck { name: String, c: usize, mid: usize },
    MaxPool { k: usize, s: usize, p: usize },
}

impl Layer {
    fn conv(name: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Self {
        Layer::Conv { name: name.into(), cin, cout, k, s, p }
    }

    fn bottleneck(name: &str, c: usize) -> Self {
        Layer::Bottleneck { name: name.into(), c, mid: c / 2 }
    }
}

/// Backbone plan: two input branches, then a shared trunk with three taps.
#[derive(Debug, Clone)]
pub struct Arch {
    pub geo: Vec<Layer>,
    pub color: Vec<Layer>,
    pub trunk: Vec<Layer>,
    /// Trunk indices (after the layer) feeding the small RPN level, RoI pooling and the large RPN level.
    pub taps: [usize; 3],
}

pub fn arch(cfg: &ModelConfig) -> Arch {
    let w = cfg.width;
    let h = w / 2;
    let geo = vec![
        Layer::conv("geo1", 1, h, 2, 2, 0),
        Layer::bottleneck("geo2", h),
        Layer::bottleneck("geo5", h),
        Layer::conv("geo8", h, w, 2, 2, 0),
        Layer::bottleneck("geo9", w),
        Layer::bottleneck("geo12", w),
    ];
    let color = if cfg.use_color {
        vec![
            Layer::conv("color1", cfg.encoder.out_channels, w, 2, 2, 0),
            Layer::bottleneck("color2", w),
            Layer::MaxPool { k: 3, s: 1, p: 1 },
            Layer::conv("color6", w, w, 2, 2, 0),
            Layer::bottleneck("color7", w),
            Layer::MaxPool { k: 3, s: 1, p: 1 },
        ]
    } else {
        Vec::new()
    };
    let joined = if cfg.use_color { 2 * w } else { w };
    let c = 2 * w;
    let trunk = vec![
        Layer::conv("combine1", joined, c, 3, 1, 1),
        Layer::bottleneck("combine2", c),
        Layer::bottleneck("combine5", c),
        Layer::MaxPool { k: 3, s: 1, p: 1 },
    ];
    Arch {
        geo,
        color,
        trunk,
        taps: [1, 2, 3],
    }
}

fn init_layers(params: &mut ParamStore<f32>, layers: &[Layer], rng: &mut ChaCha8Rng) {
    let mut conv = |params: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize, gain: f64| {
        params.init(&format!("{name}.w"), &[cout, cin, k, k, k], Init::HeUniform { gain }, rng);
        params.init(&format!("{name}.b"), &[cout], Init::Zeros, rng);
    };
    for l in layers {
        match l {
            Layer::Conv { name, cin, cout, k, .. } => conv(params, name, *cin, *cout, *k, 1.0),
            Layer::Bottleneck { name, c, mid } => {
                conv(params, &format!("{name}.a"), *c, *mid, 1, 1.0);
                conv(params, &format!("{name}.b"), *mid, *mid, 3, 1.0);
                // Small last layer keeps each block near the identity at start.
                conv(params, &format!("{name}.c"), *mid, *c, 1, 0.5);
            }
            Layer::MaxPool { .. } => {}
        }
    }
}

/// Fresh parameters for the whole model, seeded.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let a = arch(cfg);
    if cfg.use_color {
        init_encoder(&mut p, "enc", &cfg.encoder, &mut rng);
    }
    init_layers(&mut p, &a.geo, &mut rng);
    init_layers(&mut p, &a.color, &mut rng);
    init_layers(&mut p, &a.trunk, &mut rng);
    init_rpn(&mut p, cfg.rpn_dims(), cfg.anchors.counts(), &mut rng);
    init_classifier(&mut p, cfg.classifier_dims(), &mut rng);
    init_mask_head(&mut p, cfg.mask_dims(), &mut rng);
    Ok(p)
}

fn conv_layer<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, k: usize, s: usize, pad: usize) -> Result<Var> {
    tape.conv(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))), ConvGeom::cube(k, s, pad))
}

fn run_layer<T: Real>(tape: &mut Tape<T>, p: &Bound, l: &Layer, x: Var) -> Result<Var> {
    match l {
        Layer::Conv { name, k, s, p: pad, .. } => {
            let y = conv_layer(tape, p, name, x, *k, *s, *pad)?;
            Ok(tape.relu(y))
        }
        Layer::Bottleneck { name, .. } => {
            let a = conv_layer(tape, p, &format!("{name}.a"), x, 1, 1, 0)?;
            let a = tape.relu(a);
            let b = conv_layer(tape, p, &format!("{name}.b"), a, 3, 1, 1)?;
            let b = tape.relu(b);
            let c = conv_layer(tape, p, &format!("{name}.c"), b, 1, 1, 0)?;
            let s = tape.add(c, x)?;
            Ok(tape.relu(s))
        }
        Layer::MaxPool { k, s, p: pad } => tape.max_pool(x, ConvGeom::cube(*k, *s, *pad)),
    }
}

/// Backbone outputs, all at [`STRIDE`].
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub small: Var,
    pub roi: Var,
    pub large: Var,
}

/// `tsdf [1, X, Y, Z]` plus optional `color [C₂, X, Y, Z]`; spatial dims must be multiples of 4.
pub fn backbone_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, tsdf: Var, color: Option<Var>) -> Result<Backbone> {
    let dims = tape.shape(tsdf).to_vec();
    if dims.len() != 4 || dims[0] != 1 || dims[1..].iter().any(|d| d % STRIDE != 0) {
        return Err(Error::shape(format!("backbone input {dims:?} needs [1, X, Y, Z] with dims divisible by {STRIDE}")));
    }
    if cfg.use_color != color.is_some() {
        return Err(Error::Invalid("color input presence must match the model config".into()));
    }
    if let Some(c) = color {
        if tape.shape(c)[1..] != dims[1..] {
            return Err(Error::MetaMismatch(format!("geometry {dims:?} vs color {:?}", tape.shape(c))));
        }
    }
    let a = arch(cfg);
    let mut g = tsdf;
    for l in &a.geo {
        g = run_layer(tape, p, l, g)?;
    }
    let mut x = match color {
        Some(c) => {
            let mut c = c;
            for l in &a.color {
                c = run_layer(tape, p, l, c)?;
            }
            tape.concat(&[g, c])?
        }
        None => g,
    };
    let mut taps = [x; 3];
    for (i, l) in a.trunk.iter().enumerate() {
        x = run_layer(tape, p, l, x)?;
        for (t, &at) in a.taps.iter().enumerate() {
            if at == i {
                taps[t] = x;
            }
        }
    }
    Ok(Backbone {
        small: taps[0],
        roi: taps[1],
        large: taps[2],
    })
}

/// Receptive field of one output cell along one axis, in input voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    pub size: usize,
    pub stride: usize,
    /// Input coordinate of the first voxel seen by output cell 0 (may be negative).
    pub start: i64,
}

impl ReceptiveField {
    fn input() -> Self {
        Self { size: 1, stride: 1, start: 0 }
    }

    fn through(self, k: usize, s: usize, p: usize) -> Self {
        Self {
            size: self.size + (k - 1) * self.stride,
            start: self.start - (p * self.stride) as i64,
            stride: self.stride * s,
        }
    }

    fn merge(self, o: Self) -> Self {
        debug_assert_eq!(self.stride, o.stride);
        let lo = self.start.min(o.start);
        let hi = (self.start + self.size as i64).max(o.start + o.size as i64);
        Self {
            size: (hi - lo) as usize,
            stride: self.stride,
            start: lo,
        }
    }

    /// Input interval `[lo, hi)` seen by output cell `i`.
    pub fn span(&self, i: usize) -> (i64, i64) {
        let lo = self.start + (i * self.stride) as i64;
        (lo, lo + self.size as i64)
    }

    fn through_layers(mut self, layers: &[Layer]) -> Self {
        for l in layers {
            self = match l {
                Layer::Conv { k, s, p, .. } => self.through(*k, *s, *p),
                Layer::Bottleneck { .. } => self.through(3, 1, 1),
                Layer::MaxPool { k, s, p } => self.through(*k, *s, *p),
            };
        }
        self
    }
}

/// Receptive fields of the three backbone taps (small, roi, large).
pub fn receptive_fields(cfg: &ModelConfig) -> [ReceptiveField; 3] {
    let a = arch(cfg);
    let g = ReceptiveField::input().through_layers(&a.geo);
    let mut x = if cfg.use_color {
        g.merge(ReceptiveField::input().through_layers(&a.color))
    } else {
        g
    };
    let mut out = [x; 3];
    for (i, l) in a.trunk.iter().enumerate() {
        x = x.through_layers(std::slice::from_ref(l));
        for (t, &at) in a.taps.iter().enumerate() {
            if at == i {
                out[t] = x;
            }
        }
    }
    out
}
