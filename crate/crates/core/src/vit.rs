//! Minimal vision-transformer encoder: patchify, linear patch embedding with
//! learned absolute positions, pre-norm blocks, final norm. Also the token
//! grid type and its bilinear resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Bound, Graph, GridResample, ParamStore, Rng, Tensor, Var, RNG_ALGORITHM};
use crate::transformer::{
    self, block_param_count, init_block, init_linear, init_norm, init_normal,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.image_size,
            self.patch_size,
            self.channels,
            self.dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
        ];
        if fields.contains(&0) {
            return Err(Error::Geometry(format!(
                "all ViT sizes must be positive: {self:?}"
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Geometry(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Geometry(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Closed-form parameter count of [`init_params`].
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        self.patch_dim() * d
            + d
            + self.n_patches() * d
            + self.depth * block_param_count(d, self.hidden())
            + 2 * d
    }
}

/// Patch features with explicit grid geometry: `data` is `[rows·cols, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Tensor,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, data: Tensor) -> Result<Self> {
        if data.ndim() != 2 || data.rows() != rows * cols {
            return Err(Error::Geometry(format!(
                "{rows}x{cols} grid cannot hold tensor of shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn dim(&self) -> usize {
        self.data.last_dim()
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// A token grid living on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridVar {
    pub rows: usize,
    pub cols: usize,
    pub var: Var,
}

impl GridVar {
    pub fn to_grid(self, g: &Graph) -> TokenGrid {
        TokenGrid {
            rows: self.rows,
            cols: self.cols,
            data: g.value(self.var).clone(),
        }
    }
}

/// Anything that maps an image to a token grid given bound parameters.
pub trait Encoder {
    fn forward(&self, g: &mut Graph, params: &Bound, image: &Tensor) -> Result<GridVar>;
}

impl Encoder for ViTConfig {
    fn forward(&self, g: &mut Graph, params: &Bound, image: &Tensor) -> Result<GridVar> {
        encode_image_graph(g, params, self, image)
    }
}

/// Splits an `[H, W, C]` image into non-overlapping square patches in
/// row-major patch order. Each row holds one patch flattened as
/// `(y, x, channel)`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Geometry(format!(
            "{h}x{w} image not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gr, gc) = (h / patch_size, w / patch_size);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch_size {
                let row = (pr * patch_size + y) * w + pc * patch_size;
                out.extend_from_slice(&src[row * c..(row + patch_size) * c]);
            }
        }
    }
    Tensor::new(vec![gr * gc, patch_size * patch_size * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
) -> Result<Tensor> {
    if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
        return Err(Error::Geometry(format!(
            "{height}x{width} image not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gr, gc) = (height / patch_size, width / patch_size);
    if patches.shape() != [gr * gc, patch_size * patch_size * channels] {
        return Err(Error::dim(
            "unpatchify",
            patches.shape(),
            &[gr * gc, patch_size * patch_size * channels],
        ));
    }
    let mut out = vec![0.0; height * width * channels];
    for (p, patch) in patches
        .data()
        .chunks(patch_size * patch_size * channels)
        .enumerate()
    {
        let (pr, pc) = (p / gc, p % gc);
        for y in 0..patch_size {
            let row = (pr * patch_size + y) * width + pc * patch_size;
            out[row * channels..(row + patch_size) * channels].copy_from_slice(
                &patch[y * patch_size * channels..(y + 1) * patch_size * channels],
            );
        }
    }
    Tensor::new(vec![height, width, channels], out)
}

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Geometry(format!(
            "expected an [H, W, C] image, got {s:?}"
        ))),
    }
}

/// Fresh encoder weights. Metadata records the config and seed.
pub fn init_params(config: &ViTConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let d = config.dim;
    let mut store = ParamStore::new();
    init_linear(&mut store, "patch_embed", config.patch_dim(), d, rng)?;
    init_normal(&mut store, "pos_embed", &[config.n_patches(), d], 0.02, rng)?;
    for i in 0..config.depth {
        init_block(&mut store, &format!("blocks.{i}"), d, config.hidden(), rng)?;
    }
    init_norm(&mut store, "norm", d)?;
    store.set_meta("role", "encoder");
    store.set_meta("vit_config", serde_json::to_string(config)?);
    store.set_meta("seed", rng.seed().to_string());
    store.set_meta("rng", RNG_ALGORITHM);
    Ok(store)
}

/// Encodes patch rows that sit at `positions` of the full grid. Positional
/// embeddings are gathered by original index, so any subset and any order is
/// accepted.
pub fn encode_tokens(
    g: &mut Graph,
    p: &Bound,
    config: &ViTConfig,
    patches: Var,
    positions: &[usize],
) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    if shape.len() != 2 || shape[0] != positions.len() || shape[1] != config.patch_dim() {
        return Err(Error::Geometry(format!(
            "expected {} patches of width {}, got {shape:?}",
            positions.len(),
            config.patch_dim()
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&i| i >= config.n_patches()) {
        return Err(Error::Geometry(format!(
            "patch index {bad} outside a {}-patch grid",
            config.n_patches()
        )));
    }
    let pos_table = p.get("pos_embed")?;
    let x = transformer::linear(g, p, "patch_embed", patches)?;
    let pos = g.gather_rows(pos_table, positions)?;
    let mut x = g.add(x, pos)?;
    for i in 0..config.depth {
        x = transformer::block(g, p, &format!("blocks.{i}"), x, config.heads, false)?;
    }
    transformer::norm(g, p, "norm", x)
}

pub fn encode_image_graph(
    g: &mut Graph,
    p: &Bound,
    config: &ViTConfig,
    image: &Tensor,
) -> Result<GridVar> {
    let (h, w, c) = image_dims(image)?;
    if h != config.image_size || w != config.image_size || c != config.channels {
        return Err(Error::Geometry(format!(
            "image {h}x{w}x{c} does not match encoder input {0}x{0}x{1}",
            config.image_size, config.channels
        )));
    }
    let patches = g.constant(patchify(image, config.patch_size)?);
    let positions: Vec<usize> = (0..config.n_patches()).collect();
    let var = encode_tokens(g, p, config, patches, &positions)?;
    Ok(GridVar {
        rows: config.grid(),
        cols: config.grid(),
        var,
    })
}

/// Full-image inference.
pub fn encode(params: &ParamStore, config: &ViTConfig, image: &Tensor) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    Ok(encode_image_graph(&mut g, &p, config, image)?.to_grid(&g))
}

/// Inference on a subset of patches; returns a `1 × len` grid in the given
/// order.
pub fn encode_visible(
    params: &ParamStore,
    config: &ViTConfig,
    patches: &Tensor,
    positions: &[usize],
) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(patches.clone());
    let var = encode_tokens(&mut g, &p, config, x, positions)?;
    TokenGrid::new(1, positions.len(), g.value(var).clone())
}

/// Bilinear resampling of a token grid to `target_rows × target_cols`, per
/// channel, using pixel-center alignment (corners not pinned). A 2×2 grid
/// `[[0, 1], [2, 3]]` resampled to 3×3 has center 1.5 and keeps its corners.
pub fn interpolate_tokens(
    grid: &TokenGrid,
    target_rows: usize,
    target_cols: usize,
) -> Result<TokenGrid> {
    let mut g = Graph::new();
    let x = g.constant(grid.data.clone());
    let out = interpolate_graph(
        &mut g,
        GridVar {
            rows: grid.rows,
            cols: grid.cols,
            var: x,
        },
        target_rows,
        target_cols,
    )?;
    Ok(out.to_grid(&g))
}

pub fn interpolate_graph(
    g: &mut Graph,
    grid: GridVar,
    target_rows: usize,
    target_cols: usize,
) -> Result<GridVar> {
    if grid.rows == target_rows && grid.cols == target_cols {
        return Ok(grid);
    }
    let plan = GridResample::new(grid.rows, grid.cols, target_rows, target_cols)?;
    Ok(GridVar {
        rows: target_rows,
        cols: target_cols,
        var: g.interpolate(grid.var, plan)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn patch_count_arithmetic() {
        let img = Tensor::zeros(&[32, 32, 1]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[4, 256]);
    }

    #[test]
    fn patchify_row_major_hand_case() {
        let img = Tensor::new(vec![2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let p = patchify(&Tensor::full(&[8, 8, 3], 0.25), 4).unwrap();
        for r in 1..p.rows() {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn indivisible_image_is_a_geometry_error() {
        let img = Tensor::zeros(&[10, 8, 1]);
        assert!(matches!(patchify(&img, 4), Err(Error::Geometry(_))));
    }

    #[test]
    fn unpatchify_inverts_patchify_multichannel() {
        let data: Vec<f32> = (0..8 * 12 * 3).map(|v| v as f32).collect();
        let img = Tensor::new(vec![8, 12, 3], data).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(unpatchify(&p, 8, 12, 3, 4).unwrap(), img);
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig {
            patch_size: 5,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ViTConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(ViTConfig { depth: 0, ..tiny() }.validate().is_err());
        ViTConfig::default().validate().unwrap();
    }

    #[test]
    fn missing_parameter_is_reported_by_name() {
        let cfg = tiny();
        let mut store = init_params(&cfg, &mut Rng::new(0)).unwrap();
        store = store.without_prefix("blocks.0.mlp.fc2");
        let err = encode(&store, &cfg, &Tensor::zeros(&[8, 8, 1])).unwrap_err();
        assert!(err.to_string().contains("blocks.0.mlp.fc2.weight"), "{err}");
    }

    #[test]
    fn interpolation_center_value() {
        let grid =
            TokenGrid::new(2, 2, Tensor::new(vec![4, 1], vec![0., 1., 2., 3.]).unwrap()).unwrap();
        let out = interpolate_tokens(&grid, 3, 3).unwrap();
        assert_eq!(out.data.data()[4], 1.5);
        assert_eq!(out.data.data()[0], 0.0);
        assert_eq!(out.data.data()[8], 3.0);
    }
}
