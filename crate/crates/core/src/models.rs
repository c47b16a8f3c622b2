//! Generator (encoder + conditional decoder), multi-task discriminator and
//! the expression classifiers that sit on top of a frozen encoder.
//!
//! All feature maps are channel-major `(C, N, H, W)`; vectors are `(N, D)`
//! rows.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape, Error, Result};
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BlockCache, BnCache, LinearCache,
};
use crate::nn::tensor::{flatten, hconcat, to_nchw, unflatten};
use crate::nn::{Act, ConvBlock, ConvGeom, Linear, Mode, Module, Param, Real};

const DOWN: ConvGeom = ConvGeom::new(4, 2, 1);
const SAME3: ConvGeom = ConvGeom::new(3, 1, 1);
const LEAK: Act = Act::LeakyRelu(0.2);

/// Architecture hyperparameters shared by every network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Output channels of the four encoder (and discriminator) blocks.
    pub widths: [usize; 4],
    pub code_dim: usize,
    pub noise_dim: usize,
    pub n_expressions: usize,
    pub n_identities: usize,
    /// Width of the discriminator's shared fully connected layer.
    pub d_hidden: usize,
    /// Length of each local classifier's exposed hidden vector.
    pub fusion_dim: usize,
    pub local_width: usize,
    pub fused_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 48,
            channels: 3,
            widths: [32, 64, 128, 256],
            code_dim: 350,
            noise_dim: 50,
            n_expressions: 7,
            n_identities: 5,
            d_hidden: 256,
            fusion_dim: 64,
            local_width: 32,
            fused_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(invalid(format!("image_size {} must be a positive multiple of 16", self.image_size)));
        }
        if self.channels == 0 || self.widths.contains(&0) {
            return Err(invalid("channel counts must be positive"));
        }
        if self.code_dim == 0 || self.d_hidden == 0 || self.fusion_dim == 0 || self.fused_hidden == 0 {
            return Err(invalid("layer widths must be positive"));
        }
        if self.n_expressions < 2 || self.n_identities < 1 {
            return Err(invalid("need at least 2 expressions and 1 identity"));
        }
        Ok(())
    }

    /// Spatial side of the deepest feature map.
    pub fn bottleneck(&self) -> usize {
        self.image_size / 16
    }

    /// Decoder trunk input: `[f(x); z; I]`.
    pub fn decoder_input_dim(&self) -> usize {
        self.code_dim + self.noise_dim + self.n_identities
    }

    pub fn fused_input_dim(&self) -> usize {
        self.code_dim + 4 * self.fusion_dim
    }

    /// Architecture snapshot stored in checkpoints.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let w = &self.widths;
        [
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3])),
            ("code_dim", self.code_dim.to_string()),
            ("noise_dim", self.noise_dim.to_string()),
            ("n_expressions", self.n_expressions.to_string()),
            ("n_identities", self.n_identities.to_string()),
            ("d_hidden", self.d_hidden.to_string()),
            ("fusion_dim", self.fusion_dim.to_string()),
            ("local_width", self.local_width.to_string()),
            ("fused_hidden", self.fused_hidden.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            map.get(k).ok_or_else(|| Error::Format(format!("checkpoint config lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("checkpoint config `{k}` is not an integer")))
        };
        let widths: Vec<usize> = get("widths")?
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::Format("bad widths".into())))
            .collect::<Result<_>>()?;
        let widths: [usize; 4] = widths.try_into().map_err(|_| Error::Format("widths needs 4 entries".into()))?;
        let cfg = Self {
            image_size: num("image_size")?,
            channels: num("channels")?,
            widths,
            code_dim: num("code_dim")?,
            noise_dim: num("noise_dim")?,
            n_expressions: num("n_expressions")?,
            n_identities: num("n_identities")?,
            d_hidden: num("d_hidden")?,
            fusion_dim: num("fusion_dim")?,
            local_width: num("local_width")?,
            fused_hidden: num("fused_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The disentangled expression representation `f(x)`, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionCode<T: Real>(pub Array2<T>);

/// Gaussian nuisance vector `z`, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector<T: Real>(pub Array2<T>);

impl<T: Real> NoiseVector<T> {
    pub fn sample(n: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self(Array2::from_shape_fn((n, dim), |_| T::c(rng.sample::<f64, _>(StandardNormal))))
    }
}

/// One-hot target identity `I`, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCode<T: Real>(Array2<T>);

impl<T: Real> IdentityCode<T> {
    pub fn one_hot(labels: &[usize], n_identities: usize) -> Result<Self> {
        let mut m = Array2::zeros((labels.len(), n_identities));
        for (r, &l) in labels.iter().enumerate() {
            if l >= n_identities {
                return Err(invalid(format!("identity {l} out of range for {n_identities} identities")));
            }
            m[[r, l]] = T::one();
        }
        Ok(Self(m))
    }

    /// Accepts rows with exactly one entry equal to 1 and the rest 0.
    pub fn from_matrix(m: Array2<T>) -> Result<Self> {
        for (r, row) in m.axis_iter(Axis(0)).enumerate() {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(invalid(format!("identity code row {r} is not one-hot")));
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.0
    }

    pub fn labels(&self) -> Vec<usize> {
        self.0
            .axis_iter(Axis(0))
            .map(|row| row.iter().position(|&v| v == T::one()).expect("validated one-hot"))
            .collect()
    }
}

/// Logits of the two discriminator heads; `expr_logits[:, n_expressions]`
/// is the fake class.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T: Real> {
    pub expr_logits: Array2<T>,
    pub id_logits: Array2<T>,
}

impl<T: Real> DiscriminatorOutput<T> {
    pub fn batch_size(&self) -> usize {
        self.expr_logits.nrows()
    }

    /// Index of the fake class in the expression head.
    pub fn fake_class(&self) -> usize {
        self.expr_logits.ncols() - 1
    }

    pub fn row(&self, i: usize) -> Self {
        Self {
            expr_logits: self.expr_logits.slice(s![i..i + 1, ..]).to_owned(),
            id_logits: self.id_logits.slice(s![i..i + 1, ..]).to_owned(),
        }
    }
}

/// Activations of the four encoder blocks, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidueFeatures<T: Real> {
    pub maps: [Array4<T>; 4],
}

impl<T: Real> ResidueFeatures<T> {
    pub fn batch_size(&self) -> usize {
        self.maps[0].dim().1
    }

    /// The maps in `(N, C, H, W)` order.
    pub fn maps_nchw(&self) -> Vec<Array4<T>> {
        self.maps.iter().map(|m| to_nchw(m.view())).collect()
    }
}

fn check_images<T: Real>(x: &Array4<T>, channels: usize, size: usize) -> Result<()> {
    let (c, _, h, w) = x.dim();
    if c != channels || h != size || w != size {
        return Err(shape(format!("expected {channels}x{size}x{size} images, got {c}x{h}x{w}")));
    }
    Ok(())
}

/// Four stride-2 {conv, batch norm, leaky ReLU} blocks then a linear
/// projection. Also serves as the plain-CNN baseline when `out_dim` is the
/// number of classes.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real> {
    pub blocks: Vec<ConvBlock<T>>,
    pub fc: Linear<T>,
    channels: usize,
    image_size: usize,
    widths: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T: Real> {
    blocks: Vec<BlockCache<T>>,
    fc: LinearCache<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(prefix: &str, channels: usize, image_size: usize, widths: [usize; 4], out_dim: usize) -> Self {
        let mut blocks = Vec::with_capacity(4);
        let mut cin = channels;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ConvBlock::down(&format!("{prefix}.block{i}"), cin, w, DOWN, true, LEAK));
            cin = w;
        }
        let side = image_size / 16;
        let fc = Linear::new(&format!("{prefix}.fc"), widths[3] * side * side, out_dim);
        Self { blocks, fc, channels, image_size, widths }
    }

    pub fn out_dim(&self) -> usize {
        self.fc.out_dim
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(Array2<T>, ResidueFeatures<T>, EncoderCache<T>)> {
        check_images(x, self.channels, self.image_size)?;
        let mut caches = Vec::with_capacity(4);
        let mut taps = Vec::with_capacity(4);
        let mut h = x.clone();
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, mode)?;
            caches.push(c);
            taps.push(y.clone());
            h = y;
        }
        let (code, fc) = self.fc.forward(&flatten(h.view()))?;
        let maps: [Array4<T>; 4] = taps.try_into().expect("four blocks");
        Ok((code, ResidueFeatures { maps }, EncoderCache { blocks: caches, fc }))
    }

    /// Inference with running statistics; `&self`, so a shared encoder can
    /// be queried concurrently.
    pub fn infer(&self, x: &Array4<T>) -> Result<(Array2<T>, ResidueFeatures<T>)> {
        check_images(x, self.channels, self.image_size)?;
        let mut taps = Vec::with_capacity(4);
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h)?;
            taps.push(h.clone());
        }
        let (code, _) = self.fc.forward(&flatten(h.view()))?;
        let maps: [Array4<T>; 4] = taps.try_into().expect("four blocks");
        Ok((code, ResidueFeatures { maps }))
    }

    /// Backpropagates a gradient on the output; the input gradient is not needed.
    pub fn backward(&mut self, cache: &EncoderCache<T>, dout: &Array2<T>) {
        let side = self.image_size / 16;
        let dflat = self.fc.backward(&cache.fc, dout, true).expect("requested");
        let mut g = unflatten(dflat.view(), self.widths[3], side, side);
        for (i, (b, c)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            match b.backward(c, &g, i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit_params(f));
        self.fc.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.fc.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.blocks.iter().for_each(|b| b.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_buffers_mut(f));
    }
}

/// Linear expansion of `[f; z; I]`, then four stride-2 transposed
/// convolutions back to image resolution with a tanh output.
#[derive(Clone, Debug)]
pub struct Decoder<T: Real> {
    pub fc: Linear<T>,
    pub bn0: BatchNorm2d<T>,
    pub blocks: Vec<ConvBlock<T>>,
    widths: [usize; 4],
    side: usize,
    code_dim: usize,
    noise_dim: usize,
    n_identities: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T: Real> {
    fc: LinearCache<T>,
    bn0: BnCache<T>,
    act0: Array4<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Decoder<T> {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let w = cfg.widths;
        let side = cfg.bottleneck();
        let fc = Linear::new(&format!("{prefix}.fc"), cfg.decoder_input_dim(), w[3] * side * side);
        let bn0 = BatchNorm2d::new(&format!("{prefix}.bn0"), w[3]);
        let chans = [w[3], w[2], w[1], w[0], cfg.channels];
        let blocks = (0..4)
            .map(|i| {
                let last = i == 3;
                let act = if last { Act::Tanh } else { Act::Relu };
                ConvBlock::up(&format!("{prefix}.block{i}"), chans[i], chans[i + 1], DOWN, !last, act)
            })
            .collect();
        Self {
            fc,
            bn0,
            blocks,
            widths: w,
            side,
            code_dim: cfg.code_dim,
            noise_dim: cfg.noise_dim,
            n_identities: cfg.n_identities,
        }
    }

    fn trunk_input(
        &self,
        code: &ExpressionCode<T>,
        z: &NoiseVector<T>,
        id: &IdentityCode<T>,
    ) -> Result<Array2<T>> {
        let n = code.0.nrows();
        if code.0.ncols() != self.code_dim || z.0.ncols() != self.noise_dim || id.0.ncols() != self.n_identities {
            return Err(shape(format!(
                "decoder expects code {}, noise {}, identity {}; got {}, {}, {}",
                self.code_dim,
                self.noise_dim,
                self.n_identities,
                code.0.ncols(),
                z.0.ncols(),
                id.0.ncols()
            )));
        }
        if z.0.nrows() != n || id.0.nrows() != n {
            return Err(shape("decoder inputs disagree on batch size"));
        }
        Ok(hconcat(&[code.0.view(), z.0.view(), id.0.view()]))
    }

    pub fn forward(
        &mut self,
        code: &ExpressionCode<T>,
        z: &NoiseVector<T>,
        id: &IdentityCode<T>,
        mode: Mode,
    ) -> Result<(Array4<T>, DecoderCache<T>)> {
        let input = self.trunk_input(code, z, id)?;
        let (h, fc) = self.fc.forward(&input)?;
        let h = unflatten(h.view(), self.widths[3], self.side, self.side);
        let (h, bn0) = self.bn0.forward(&h, mode);
        let act0 = Act::Relu.apply(h);
        let mut caches = Vec::with_capacity(4);
        let mut h = act0.clone();
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, DecoderCache { fc, bn0, act0, blocks: caches }))
    }

    pub fn infer(&self, code: &ExpressionCode<T>, z: &NoiseVector<T>, id: &IdentityCode<T>) -> Result<Array4<T>> {
        let input = self.trunk_input(code, z, id)?;
        let (h, _) = self.fc.forward(&input)?;
        let h = unflatten(h.view(), self.widths[3], self.side, self.side);
        let mut h = Act::Relu.apply(self.bn0.infer(&h));
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        Ok(h)
    }

    /// Returns the gradient on the code part of the trunk input.
    pub fn backward(&mut self, cache: &DecoderCache<T>, dimg: &Array4<T>) -> Array2<T> {
        let mut g = dimg.clone();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g, true).expect("requested");
        }
        let g = Act::Relu.backward(&cache.act0, &g);
        let g = self.bn0.backward(&cache.bn0, &g);
        let dinput = self.fc.backward(&cache.fc, &flatten(g.view()), true).expect("requested");
        dinput.slice(s![.., ..self.code_dim]).to_owned()
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc.visit_params(f);
        self.bn0.visit_params(f);
        self.blocks.iter().for_each(|b| b.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc.visit_params_mut(f);
        self.bn0.visit_params_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.bn0.visit_buffers(f);
        self.blocks.iter().for_each(|b| b.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.bn0.visit_buffers_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_buffers_mut(f));
    }
}

/// Encoder and decoder.
#[derive(Clone, Debug)]
pub struct Generator<T: Real> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub config: ModelConfig,
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: Encoder::new("encoder", cfg.channels, cfg.image_size, cfg.widths, cfg.code_dim),
            decoder: Decoder::new("decoder", cfg),
            config: cfg.clone(),
        })
    }

    /// `f(x)` and the four residue maps, using running statistics.
    pub fn encode(&self, x: &Array4<T>) -> Result<(ExpressionCode<T>, ResidueFeatures<T>)> {
        let (code, taps) = self.encoder.infer(x)?;
        Ok((ExpressionCode(code), taps))
    }

    /// `G_de(f, z, I)`, using running statistics.
    pub fn decode(&self, f: &ExpressionCode<T>, z: &NoiseVector<T>, i: &IdentityCode<T>) -> Result<Array4<T>> {
        self.decoder.infer(f, z, i)
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.encoder.visit_buffers(f);
        self.decoder.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.encoder.visit_buffers_mut(f);
        self.decoder.visit_buffers_mut(f);
    }
}

/// Shared convolutional trunk and fully connected layer, split into an
/// `(N_e + 1)`-way expression/fake head and an `N_i`-way identity head.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real> {
    pub blocks: Vec<ConvBlock<T>>,
    pub shared: Linear<T>,
    pub expr_head: Linear<T>,
    pub id_head: Linear<T>,
    pub config: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T: Real> {
    blocks: Vec<BlockCache<T>>,
    shared: LinearCache<T>,
    hidden: Array2<T>,
    expr: LinearCache<T>,
    id: LinearCache<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(4);
        let mut cin = cfg.channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            // no normalization on the block that sees raw pixels
            blocks.push(ConvBlock::down(&format!("disc.block{i}"), cin, w, DOWN, i > 0, LEAK));
            cin = w;
        }
        let side = cfg.bottleneck();
        Ok(Self {
            blocks,
            shared: Linear::new("disc.shared", cfg.widths[3] * side * side, cfg.d_hidden),
            expr_head: Linear::new("disc.expr_head", cfg.d_hidden, cfg.n_expressions + 1),
            id_head: Linear::new("disc.id_head", cfg.d_hidden, cfg.n_identities),
            config: cfg.clone(),
        })
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<(DiscriminatorOutput<T>, DiscriminatorCache<T>)> {
        check_images(x, self.config.channels, self.config.image_size)?;
        let mut caches = Vec::with_capacity(4);
        let mut h = x.clone();
        for b in &mut self.blocks {
            let (y, c) = b.forward(&h, mode)?;
            caches.push(c);
            h = y;
        }
        let (hid, shared) = self.shared.forward(&flatten(h.view()))?;
        let hidden = LEAK.apply(hid);
        let (expr_logits, expr) = self.expr_head.forward(&hidden)?;
        let (id_logits, id) = self.id_head.forward(&hidden)?;
        Ok((
            DiscriminatorOutput { expr_logits, id_logits },
            DiscriminatorCache { blocks: caches, shared, hidden, expr, id },
        ))
    }

    /// Inference with running statistics.
    pub fn discriminate(&self, x: &Array4<T>) -> Result<DiscriminatorOutput<T>> {
        check_images(x, self.config.channels, self.config.image_size)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let hidden = LEAK.apply(self.shared.forward(&flatten(h.view()))?.0);
        Ok(DiscriminatorOutput {
            expr_logits: self.expr_head.forward(&hidden)?.0,
            id_logits: self.id_head.forward(&hidden)?.0,
        })
    }

    /// Backpropagates head gradients; returns the gradient on the input
    /// images when `need_dx`.
    pub fn backward(
        &mut self,
        cache: &DiscriminatorCache<T>,
        d_expr: &Array2<T>,
        d_id: &Array2<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let mut dh = self.expr_head.backward(&cache.expr, d_expr, true).expect("requested");
        dh += &self.id_head.backward(&cache.id, d_id, true).expect("requested");
        let dh = LEAK.backward(&cache.hidden, &dh);
        let dflat = self.shared.backward(&cache.shared, &dh, true).expect("requested");
        let side = self.config.bottleneck();
        let mut g = unflatten(dflat.view(), self.config.widths[3], side, side);
        for (i, (b, c)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            match b.backward(c, &g, i > 0 || need_dx) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit_params(f));
        self.shared.visit_params(f);
        self.expr_head.visit_params(f);
        self.id_head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.shared.visit_params_mut(f);
        self.expr_head.visit_params_mut(f);
        self.id_head.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.blocks.iter().for_each(|b| b.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_buffers_mut(f));
    }
}

/// Two 3x3 conv blocks, global average pooling, a hidden layer whose
/// activations are exposed for fusion, and an `N_e`-way output layer.
#[derive(Clone, Debug)]
pub struct LocalClassifier<T: Real> {
    pub convs: [ConvBlock<T>; 2],
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct LocalCache<T: Real> {
    convs: [BlockCache<T>; 2],
    spatial: (usize, usize),
    hidden: LinearCache<T>,
    h: Array2<T>,
    out: LinearCache<T>,
}

impl<T: Real> LocalClassifier<T> {
    pub fn new(prefix: &str, in_ch: usize, cfg: &ModelConfig) -> Self {
        let lw = cfg.local_width;
        Self {
            convs: [
                ConvBlock::down(&format!("{prefix}.conv0"), in_ch, lw, SAME3, true, Act::Relu),
                ConvBlock::down(&format!("{prefix}.conv1"), lw, lw, SAME3, true, Act::Relu),
            ],
            hidden: Linear::new(&format!("{prefix}.hidden"), lw, cfg.fusion_dim),
            out: Linear::new(&format!("{prefix}.out"), cfg.fusion_dim, cfg.n_expressions),
        }
    }

    /// Returns `(logits, exposed hidden vector, cache)`.
    pub fn forward(&mut self, tap: &Array4<T>, mode: Mode) -> Result<(Array2<T>, Array2<T>, LocalCache<T>)> {
        let (a, c0) = self.convs[0].forward(tap, mode)?;
        let (b, c1) = self.convs[1].forward(&a, mode)?;
        let (_, _, h, w) = b.dim();
        let pooled = global_avg_pool(&b);
        let (hid, hidden) = self.hidden.forward(&pooled)?;
        let hvec = Act::Relu.apply(hid);
        let (logits, out) = self.out.forward(&hvec)?;
        let cache = LocalCache { convs: [c0, c1], spatial: (h, w), hidden, h: hvec.clone(), out };
        Ok((logits, hvec, cache))
    }

    pub fn infer(&self, tap: &Array4<T>) -> Result<(Array2<T>, Array2<T>)> {
        let b = self.convs[1].infer(&self.convs[0].infer(tap)?)?;
        let hvec = Act::Relu.apply(self.hidden.forward(&global_avg_pool(&b))?.0);
        Ok((self.out.forward(&hvec)?.0, hvec))
    }

    /// Backpropagates a logit gradient. The taps come from a frozen encoder,
    /// so no input gradient is produced.
    pub fn backward(&mut self, cache: &LocalCache<T>, dlogits: &Array2<T>) {
        let dh = self.out.backward(&cache.out, dlogits, true).expect("requested");
        let dh = Act::Relu.backward(&cache.h, &dh);
        let dpool = self.hidden.backward(&cache.hidden, &dh, true).expect("requested");
        let g = global_avg_pool_backward(&dpool, cache.spatial.0, cache.spatial.1);
        let g = self.convs[1].backward(&cache.convs[1], &g, true).expect("requested");
        self.convs[0].backward(&cache.convs[0], &g, false);
    }
}

impl<T: Real> Module<T> for LocalClassifier<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.convs.iter().for_each(|b| b.visit_params(f));
        self.hidden.visit_params(f);
        self.out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.convs.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.hidden.visit_params_mut(f);
        self.out.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<T>)) {
        self.convs.iter().for_each(|b| b.visit_buffers(f));
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<T>)) {
        self.convs.iter_mut().for_each(|b| b.visit_buffers_mut(f));
    }
}

/// Classifier over `[f(x); h1; h2; h3; h4]`.
#[derive(Clone, Debug)]
pub struct FusedClassifier<T: Real> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
    input_dim: usize,
}

#[derive(Clone, Debug)]
pub struct FusedCache<T: Real> {
    hidden: LinearCache<T>,
    h: Array2<T>,
    out: LinearCache<T>,
}

impl<T: Real> FusedClassifier<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let input_dim = cfg.fused_input_dim();
        let hidden = Linear::new("fused.hidden", input_dim, cfg.fused_hidden);
        assert_eq!(hidden.in_dim, cfg.code_dim + 4 * cfg.fusion_dim);
        Self { hidden, out: Linear::new("fused.out", cfg.fused_hidden, cfg.n_expressions), input_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn forward(&self, input: &Array2<T>) -> Result<(Array2<T>, FusedCache<T>)> {
        let (h, hidden) = self.hidden.forward(input)?;
        let h = Act::Relu.apply(h);
        let (logits, out) = self.out.forward(&h)?;
        Ok((logits, FusedCache { hidden, h, out }))
    }

    pub fn backward(&mut self, cache: &FusedCache<T>, dlogits: &Array2<T>) {
        let dh = self.out.backward(&cache.out, dlogits, true).expect("requested");
        let dh = Act::Relu.backward(&cache.h, &dh);
        self.hidden.backward(&cache.hidden, &dh, false);
    }
}

impl<T: Real> Module<T> for FusedClassifier<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.hidden.visit_params(f);
        self.out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.hidden.visit_params_mut(f);
        self.out.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, named_params, param_count};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((cfg.channels, n, cfg.image_size, cfg.image_size), |_| rng.random_range(-1.0..1.0))
    }

    fn small() -> ModelConfig {
        ModelConfig { widths: [8, 8, 16, 16], n_expressions: 4, n_identities: 5, ..Default::default() }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = small();
        let mut g = Generator::<f32>::new(&cfg).unwrap();
        init_weights(&mut g, 1, 0.02);
        let x = images(3, &cfg, 0);
        let (code, taps) = g.encode(&x).unwrap();
        assert_eq!(code.0.dim(), (3, 350));
        let nchw = taps.maps_nchw();
        assert_eq!(nchw.len(), 4);
        let sides: Vec<usize> = nchw.iter().map(|m| m.dim().2).collect();
        assert_eq!(sides, vec![24, 12, 6, 3]);
        assert!(nchw.iter().all(|m| m.dim().0 == 3));
        assert_eq!(g.encode(&x).unwrap(), (code, taps));
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let cfg = small();
        let g = Generator::<f32>::new(&cfg).unwrap();
        let x = Array4::<f32>::zeros((3, 1, 32, 32));
        assert!(matches!(g.encode(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_input_is_code_noise_identity() {
        let cfg = small();
        assert_eq!(cfg.decoder_input_dim(), 405);
        let mut g = Generator::<f32>::new(&cfg).unwrap();
        init_weights(&mut g, 2, 0.02);
        assert_eq!(g.decoder.fc.in_dim, 405);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (code, _) = g.encode(&images(2, &cfg, 1)).unwrap();
        let z = NoiseVector::sample(2, 50, &mut rng);
        let id = IdentityCode::one_hot(&[0, 4], 5).unwrap();
        let out = g.decode(&code, &z, &id).unwrap();
        assert_eq!(out.dim(), (3, 2, 48, 48));
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(out, g.decode(&code, &z, &id).unwrap());
    }

    #[test]
    fn one_hot_validation() {
        use ndarray::array;
        assert!(IdentityCode::<f32>::from_matrix(array![[0.0, 1.0, 0.0]]).is_ok());
        assert!(IdentityCode::<f32>::from_matrix(array![[0.5, 0.5, 0.0]]).is_err());
        assert!(IdentityCode::<f32>::from_matrix(array![[1.0, 1.0, 0.0]]).is_err());
        assert!(IdentityCode::<f32>::from_matrix(array![[0.0, 0.0, 0.0]]).is_err());
        assert!(IdentityCode::<f32>::from_matrix(array![[2.0, -1.0, 0.0]]).is_err());
        assert!(IdentityCode::<f32>::one_hot(&[3], 3).is_err());
        assert_eq!(IdentityCode::<f32>::one_hot(&[2, 0], 3).unwrap().labels(), vec![2, 0]);
    }

    #[test]
    fn discriminator_head_sizes() {
        for (ne, ni) in [(7, 118), (6, 31)] {
            let cfg = ModelConfig { n_expressions: ne, n_identities: ni, ..small() };
            let mut d = Discriminator::<f32>::new(&cfg).unwrap();
            init_weights(&mut d, 0, 0.02);
            let out = d.discriminate(&images(2, &cfg, 3)).unwrap();
            assert_eq!(out.expr_logits.dim(), (2, ne + 1));
            assert_eq!(out.id_logits.dim(), (2, ni));
        }
    }

    #[test]
    fn zeroed_heads_give_uniform_softmax() {
        let cfg = small();
        let mut d = Discriminator::<f64>::new(&cfg).unwrap();
        init_weights(&mut d, 0, 0.02);
        for head in [&mut d.expr_head, &mut d.id_head] {
            head.weight.value.fill(0.0);
        }
        let x = images(2, &cfg, 4).mapv(|v| v as f64);
        let out = d.discriminate(&x).unwrap();
        for logits in [&out.expr_logits, &out.id_logits] {
            let row = logits.row(0);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for v in row.iter() {
                assert!((v.exp() / z - 1.0 / row.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initialization_statistics_and_determinism() {
        let mut lin = Linear::<f64>::new("big", 1000, 1000);
        init_weights(&mut lin, 7, 0.02);
        let n = lin.weight.value.len() as f64;
        let mean = lin.weight.value.sum() / n;
        let std = (lin.weight.value.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
        assert!((0.0195..=0.0205).contains(&std), "std {std}");
        assert!(mean.abs() <= 0.0005, "mean {mean}");
        assert!(lin.bias.value.iter().all(|&b| b == 0.0));

        let cfg = small();
        let mut a = Generator::<f32>::new(&cfg).unwrap();
        let mut b = Generator::<f32>::new(&cfg).unwrap();
        init_weights(&mut a, 3, 0.02);
        init_weights(&mut b, 3, 0.02);
        assert_eq!(named_params(&a), named_params(&b));
        assert!(param_count(&a) > 0);
    }

    #[test]
    fn fused_input_width() {
        let cfg = small();
        let fused = FusedClassifier::<f32>::new(&cfg);
        assert_eq!(fused.input_dim(), 350 + 4 * 64);
    }

    #[test]
    fn model_config_map_round_trip() {
        let cfg = small();
        assert_eq!(ModelConfig::from_map(&cfg.to_map()).unwrap(), cfg);
    }
}
