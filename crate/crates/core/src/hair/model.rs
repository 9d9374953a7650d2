use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dac::{dac_forward, dac_widths, fill_fan_in, DacStageVars, DacVars, DAC_STAGES};
use super::desc::{hyperize, restormer_desc, ArchDesc, Role};
use super::select::{hypertrans_forward, hsn_select, init_fcnn, FcnnVars, HyperTransBlock, WeightBox};
use crate::arch::{resample_down, resample_up, skip_fuse, transformer_block_forward, BlockHyper, ParamLayout};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

/// Shape of a HAIR network. `blocks`, `heads` and `box_sizes` are per level.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks: Vec<usize>,
    pub heads: Vec<usize>,
    pub box_sizes: Vec<usize>,
    pub ffn_expansion: f64,
    /// Number of plain stages before the classifier.
    pub split: usize,
}

impl ModelConfig {
    /// Small CPU-sized network.
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            blocks: vec![1, 1, 1, 1],
            heads: vec![1, 1, 2, 2],
            box_sizes: vec![2, 2, 2, 2],
            ffn_expansion: 2.66,
            split: 3,
        }
    }

    /// Full-size Res-HAIR.
    pub fn paper() -> Self {
        Self {
            base_channels: 48,
            blocks: vec![4, 6, 6, 8],
            heads: vec![1, 2, 4, 8],
            box_sizes: vec![5, 7, 7, 9],
            ffn_expansion: 2.66,
            split: 3,
        }
    }

    /// Same network with single-row boxes: every block gets fixed parameters.
    pub fn fixed_twin(&self) -> Self {
        Self {
            box_sizes: vec![1; self.box_sizes.len()],
            ..self.clone()
        }
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn giv_len(&self) -> usize {
        2 * self.base_channels
    }

    pub fn desc(&self) -> Result<ArchDesc> {
        let base = restormer_desc(self.base_channels, &self.blocks, &self.heads, self.ffn_expansion)?;
        hyperize(&base, self.split, &self.box_sizes)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[B, 3, H, W]`
    pub restored: Var,
    /// `[B, 3, H, W]` correction added to the input: `restored = x + residual`.
    pub residual: Var,
    /// `[B, 2C]`, absent when no stage is hyper-parameterised.
    pub giv: Option<Var>,
}

/// Identifies one transformer block by stage index and position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockId {
    pub stage: usize,
    pub block: usize,
}

/// Restoration network with the classifier, selectors and weight boxes, all
/// parameters held in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HairModel<T> {
    config: ModelConfig,
    desc: ArchDesc,
    store: ParamStore<T>,
}

impl<T: Scalar> HairModel<T> {
    /// Seeded initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let desc = config.desc()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let conv = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(shape);
            fill_fan_in(&mut t, rng);
            t
        };
        store.insert("embed.conv", conv(&[c, IMAGE_CHANNELS, 3, 3], &mut rng))?;
        let levels = desc.levels();
        for (i, stage) in desc.stages.iter().enumerate() {
            let width = stage.channels;
            if stage.role == Role::Decoder {
                store.insert(format!("up{}.conv", stage.level), conv(&[4 * width, 2 * width, 1, 1], &mut rng))?;
                store.insert(format!("fuse{}.conv", stage.level), conv(&[width, 2 * width, 1, 1], &mut rng))?;
            }
            if desc.dac_at == Some(i) {
                let w = dac_widths(width, c);
                for k in 0..DAC_STAGES {
                    let p = format!("dac.stage{}", k + 1);
                    store.insert(format!("{p}.conv1"), conv(&[w[k], w[k], 3, 3], &mut rng))?;
                    store.insert(format!("{p}.conv2"), conv(&[w[k], w[k], 3, 3], &mut rng))?;
                    store.insert(format!("{p}.down"), conv(&[w[k + 1], w[k], 3, 3], &mut rng))?;
                }
            }
            let layout = ParamLayout::new(desc.block_hyper(stage)?)?;
            let name = stage.name();
            if let Some(n) = stage.box_size {
                let weight_box = WeightBox::<T>::init(layout, n, stage.level, &mut rng)?;
                store.insert(format!("{name}.box"), weight_box.into_rows())?;
                for b in 0..stage.blocks {
                    let (w, bias) = init_fcnn::<T>(config.giv_len(), n, &mut rng);
                    store.insert(format!("{name}.block{b}.fcnn.weight"), w)?;
                    store.insert(format!("{name}.block{b}.fcnn.bias"), bias)?;
                }
            } else {
                for b in 0..stage.blocks {
                    let w = Tensor::from_parts(vec![layout.len()], layout.init::<T>(&mut rng));
                    store.insert(format!("{name}.block{b}.w"), w)?;
                }
            }
            if stage.role == Role::Encoder && stage.level < levels {
                store.insert(format!("down{}.conv", stage.level), conv(&[2 * width, 4 * width, 1, 1], &mut rng))?;
            }
        }
        store.insert("out.conv", conv(&[IMAGE_CHANNELS, c, 3, 3], &mut rng))?;
        Ok(Self { config, desc, store })
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// fresh instance of `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        template.store.check_compatible(&store)?;
        // Keep the canonical order regardless of how `store` was assembled.
        let mut ordered = ParamStore::new();
        for name in template.store.names() {
            ordered.insert(name, store.get(name).cloned().ok_or_else(|| Error::MissingTensor(name.into()))?)?;
        }
        Ok(Self {
            config,
            desc: template.desc,
            store: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn desc(&self) -> &ArchDesc {
        &self.desc
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn cast<U: Scalar>(&self) -> HairModel<U> {
        HairModel {
            config: self.config.clone(),
            desc: self.desc.clone(),
            store: self.store.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| bound.get(i))
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Every (stage, block) pair whose parameters come from a weight box.
    pub fn hyper_blocks(&self) -> Vec<BlockId> {
        let mut ids = Vec::new();
        for (stage, s) in self.desc.stages.iter().enumerate() {
            if s.is_hyper() {
                ids.extend((0..s.blocks).map(|block| BlockId { stage, block }));
            }
        }
        ids
    }

    pub fn block_name(&self, id: BlockId) -> String {
        format!("{}.block{}", self.desc.stages[id.stage].name(), id.block)
    }

    pub fn block_hyper(&self, stage: usize) -> Result<BlockHyper> {
        self.desc.block_hyper(&self.desc.stages[stage])
    }

    /// Graph handles of a hyper block.
    pub fn hyper_block(&self, bound: &Bound, id: BlockId) -> Result<HyperTransBlock> {
        let stage = &self.desc.stages[id.stage];
        if !stage.is_hyper() {
            return Err(Error::invalid("hyper_block", format!("{} is not hyper-parameterised", stage.name())));
        }
        let name = self.block_name(id);
        Ok(HyperTransBlock {
            fcnn: FcnnVars {
                weight: self.var(bound, &format!("{name}.fcnn.weight"))?,
                bias: self.var(bound, &format!("{name}.fcnn.bias"))?,
            },
            weight_box: self.var(bound, &format!("{}.box", stage.name()))?,
            hyper: self.block_hyper(id.stage)?,
        })
    }

    pub fn dac_vars(&self, bound: &Bound) -> Result<DacVars> {
        let stages = (1..=DAC_STAGES)
            .map(|k| {
                Ok(DacStageVars {
                    conv1: self.var(bound, &format!("dac.stage{k}.conv1"))?,
                    conv2: self.var(bound, &format!("dac.stage{k}.conv2"))?,
                    down: self.var(bound, &format!("dac.stage{k}.down"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DacVars { stages })
    }

    /// Selecting vector of every hyper block for one GIV `[2C]`.
    pub fn selecting_vectors(&self, g: &mut Graph<T>, bound: &Bound, giv: Var) -> Result<Vec<Var>> {
        self.hyper_blocks()
            .into_iter()
            .map(|id| {
                let block = self.hyper_block(bound, id)?;
                hsn_select(g, giv, block.fcnn)
            })
            .collect()
    }

    /// Restores `x: [B, 3, H, W]`. Each image is processed separately so that
    /// it gets its own GIV and generated block weights.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<ModelOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[0] == 0 || shape[1] != IMAGE_CHANNELS || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape("model_forward", format!("input {shape:?} is not [B, 3, H, W]")));
        }
        let mut restored = Vec::with_capacity(shape[0]);
        let mut residuals = Vec::with_capacity(shape[0]);
        let mut givs = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let xb = if shape[0] == 1 { x } else { g.narrow(x, 0, b, 1)? };
            let (y, r, giv) = self.forward_one(g, bound, xb)?;
            restored.push(y);
            residuals.push(r);
            givs.extend(giv);
        }
        let join = |g: &mut Graph<T>, v: &[Var]| if v.len() == 1 { Ok(v[0]) } else { g.concat(v, 0) };
        let restored = join(g, &restored)?;
        let residual = join(g, &residuals)?;
        let giv = if givs.is_empty() { None } else { Some(join(g, &givs)?) };
        Ok(ModelOutput { restored, residual, giv })
    }

    fn forward_one(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<(Var, Var, Option<Var>)> {
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let levels = self.desc.levels();
        let multiple = 1 << (levels - 1);
        let padded = pad_to_multiple(g, x, multiple)?;

        let mut f = g.conv2d(padded, self.var(bound, "embed.conv")?, 1, 1, 1)?;
        let mut skips = Vec::with_capacity(levels - 1);
        let mut giv = None;
        for (i, stage) in self.desc.stages.iter().enumerate() {
            if stage.role == Role::Decoder {
                f = resample_up(g, f, self.var(bound, &format!("up{}.conv", stage.level))?)?;
                let skip = skips.pop().ok_or_else(|| Error::invalid("model_forward", "unbalanced skips"))?;
                f = skip_fuse(g, f, skip, self.var(bound, &format!("fuse{}.conv", stage.level))?)?;
            }
            if self.desc.dac_at == Some(i) {
                let tap = pad_to_multiple(g, f, 1 << DAC_STAGES)?;
                let dac = self.dac_vars(bound)?;
                let v = dac_forward(g, tap, &dac)?;
                giv = Some(g.reshape(v, &[1, self.config.giv_len()])?);
            }
            let hyper = self.desc.block_hyper(stage)?;
            for block in 0..stage.blocks {
                let id = BlockId { stage: i, block };
                f = if stage.is_hyper() {
                    let giv = giv.ok_or_else(|| Error::invalid("model_forward", "hyper stage before the classifier"))?;
                    let handles = self.hyper_block(bound, id)?;
                    let v = g.reshape(giv, &[self.config.giv_len()])?;
                    hypertrans_forward(g, f, v, &handles)?
                } else {
                    let w = self.var(bound, &format!("{}.w", self.block_name(id)))?;
                    transformer_block_forward(g, f, w, &hyper)?
                };
            }
            if stage.role == Role::Encoder {
                skips.push(f);
                f = resample_down(g, f, self.var(bound, &format!("down{}.conv", stage.level))?)?;
            }
        }
        let residual = g.conv2d(f, self.var(bound, "out.conv")?, 1, 1, 1)?;
        let out = g.add(padded, residual)?;
        let out = crop(g, out, h, w)?;
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        let residual = crop(g, residual, h, w)?;
        Ok((out, residual, giv))
    }

    /// Forward pass with every parameter frozen; returns the restored images and GIVs.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv)?;
        let giv = out.giv.map(|v| g.value(v).clone());
        Ok((g.value(out.restored).clone(), giv))
    }

    pub fn restore(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.0)
    }
}

/// Reflect-pads bottom and right so both extents become multiples of `m`.
fn pad_to_multiple<T: Scalar>(g: &mut Graph<T>, x: Var, m: usize) -> Result<Var> {
    let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
    let (ph, pw) = (h.next_multiple_of(m) - h, w.next_multiple_of(m) - w);
    if ph == 0 && pw == 0 {
        Ok(x)
    } else {
        g.pad_reflect(x, 0, ph, 0, pw)
    }
}

fn crop<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let x = if g.shape(x)[2] != h { g.narrow(x, 2, 0, h)? } else { x };
    if g.shape(x)[3] != w {
        g.narrow(x, 3, 0, w)
    } else {
        Ok(x)
    }
}
