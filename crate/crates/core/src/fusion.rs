//! Channel-wise fusion of a frozen generalist encoder with a trainable
//! specialist encoder. The specialist grid is resampled to the generalist
//! geometry; generalist channels come first.

use crate::error::{Error, Result};
use crate::heads::{finetune_head, FinetuneConfig, FinetuneOutcome, HeadSample, HeadTask};
use crate::numkernel::{Bound, Graph, ParamStore, Rng, Tensor};
use crate::vit::{
    self, interpolate_graph, interpolate_tokens, Encoder, GridVar, TokenGrid, ViTConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub grid: TokenGrid,
    pub gen_dim: usize,
    pub spec_dim: usize,
}

pub fn fuse(gen: &TokenGrid, spec: &TokenGrid) -> Result<FusedFeatures> {
    let spec = interpolate_tokens(spec, gen.rows, gen.cols)?;
    let (dg, ds) = (gen.dim(), spec.dim());
    let mut data = Vec::with_capacity(gen.tokens() * (dg + ds));
    for r in 0..gen.tokens() {
        data.extend_from_slice(gen.data.row(r));
        data.extend_from_slice(spec.data.row(r));
    }
    Ok(FusedFeatures {
        grid: TokenGrid::new(
            gen.rows,
            gen.cols,
            Tensor::new(vec![gen.tokens(), dg + ds], data)?,
        )?,
        gen_dim: dg,
        spec_dim: ds,
    })
}

/// Graph form of [`fuse`].
pub fn fuse_graph(g: &mut Graph, gen: GridVar, spec: GridVar) -> Result<GridVar> {
    let spec = interpolate_graph(g, spec, gen.rows, gen.cols)?;
    let var = g.concat_cols(gen.var, spec.var)?;
    Ok(GridVar {
        rows: gen.rows,
        cols: gen.cols,
        var,
    })
}

/// Fresh generalist weights, frozen.
pub fn init_generalist(config: &ViTConfig, rng: &mut Rng) -> Result<ParamStore> {
    let mut store = vit::init_params(config, rng)?;
    store.set_meta("role", "generalist");
    store.freeze();
    Ok(store)
}

/// Encoder whose bound parameters are the specialist's; the generalist is
/// held inside and always bound as constants.
pub struct FusedEncoder {
    pub generalist_config: ViTConfig,
    generalist: ParamStore,
    pub specialist_config: ViTConfig,
}

impl FusedEncoder {
    /// Takes ownership of the generalist and freezes it.
    pub fn new(
        generalist_config: ViTConfig,
        mut generalist: ParamStore,
        specialist_config: ViTConfig,
    ) -> Result<Self> {
        generalist_config.validate()?;
        specialist_config.validate()?;
        if generalist_config.image_size != specialist_config.image_size
            || generalist_config.channels != specialist_config.channels
        {
            return Err(Error::Incompatible(format!(
                "generalist input {0}x{0}x{1} differs from specialist input {2}x{2}x{3}",
                generalist_config.image_size,
                generalist_config.channels,
                specialist_config.image_size,
                specialist_config.channels
            )));
        }
        generalist.freeze();
        Ok(Self {
            generalist_config,
            generalist,
            specialist_config,
        })
    }

    pub fn generalist(&self) -> &ParamStore {
        &self.generalist
    }

    pub fn dim(&self) -> usize {
        self.generalist_config.dim + self.specialist_config.dim
    }

    pub fn features(&self, specialist: &ParamStore, image: &Tensor) -> Result<FusedFeatures> {
        let gen = vit::encode(&self.generalist, &self.generalist_config, image)?;
        let spec = vit::encode(specialist, &self.specialist_config, image)?;
        fuse(&gen, &spec)
    }
}

impl Encoder for FusedEncoder {
    fn forward(&self, g: &mut Graph, params: &Bound, image: &Tensor) -> Result<GridVar> {
        let gb = self.generalist.bind(g, false);
        let gen = vit::encode_image_graph(g, &gb, &self.generalist_config, image)?;
        let spec = vit::encode_image_graph(g, params, &self.specialist_config, image)?;
        fuse_graph(g, gen, spec)
    }
}

/// Finetunes the specialist and a head on fused features. Fails if the
/// generalist changed.
pub fn fuse_train(
    fused: &FusedEncoder,
    specialist: ParamStore,
    head: ParamStore,
    task: HeadTask,
    data: &[HeadSample],
    config: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<FinetuneOutcome> {
    let before = fused.generalist.sha256();
    let out = finetune_head(fused, specialist, head, task, data, config, rng)?;
    if fused.generalist.sha256() != before {
        return Err(Error::Frozen(
            "generalist weights changed during training".into(),
        ));
    }
    Ok(out)
}
