//! Images, patch-level latent grids and the toy visual encoder.
//!
//! A [`PatchGrid`] is conceptually `d × H' × W'`. It is stored token-major
//! (`[H'·W', d]`, cells in raster order) because every consumer treats cells
//! as tokens.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// RGB image, `3 × H × W`, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != 3 * height * width {
            return shape_err(format!(
                "{} pixel values for a 3x{height}x{width} image",
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * height * width);
        for c in rgb {
            pixels.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Binary PPM (P6) with 8-bit channels.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// Splits an image into `P × P` patches. Row `i·W' + j` holds patch `(i, j)`
/// with entries ordered channel, patch row, patch column.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return shape_err(format!(
            "image {}x{} not divisible by patch size {patch}",
            image.height, image.width
        ));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let mut out = Tensor::zeros(gh * gw, 3 * patch * patch);
    for i in 0..gh {
        for j in 0..gw {
            let row = out.row_mut(i * gw + j);
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        row[(c * patch + py) * patch + px] = image.get(c, i * patch + py, j * patch + px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]. Values are not clamped.
pub fn unpatchify(patches: &Tensor, grid_h: usize, grid_w: usize, patch: usize) -> Result<Image> {
    if patches.shape() != (grid_h * grid_w, 3 * patch * patch) {
        return shape_err(format!(
            "patch tensor {:?} for a {grid_h}x{grid_w} grid of {patch}px patches",
            patches.shape()
        ));
    }
    let (h, w) = (grid_h * patch, grid_w * patch);
    let mut pixels = vec![0.0; 3 * h * w];
    for i in 0..grid_h {
        for j in 0..grid_w {
            let row = patches.row(i * grid_w + j);
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        pixels[(c * h + i * patch + py) * w + j * patch + px] =
                            row[(c * patch + py) * patch + px];
                    }
                }
            }
        }
    }
    Ok(Image { height: h, width: w, pixels })
}

/// `d × H' × W'` grid of patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    tokens: Tensor,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, tokens: Tensor) -> Result<Self> {
        if height == 0 || width == 0 || tokens.rows() != height * width {
            return shape_err(format!(
                "{} tokens cannot fill a {height}x{width} grid",
                tokens.rows()
            ));
        }
        if !tokens.all_finite() {
            return Err(Error::InvalidArgument("non-finite grid value".into()));
        }
        Ok(Self { height, width, tokens })
    }

    pub fn zeros(dim: usize, height: usize, width: usize) -> Self {
        Self { height, width, tokens: Tensor::zeros(height * width, dim) }
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Value at channel `c`, row `i`, column `j`.
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.tokens.get(i * self.width + j, c)
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        self.tokens.row(idx)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn bit_eq(&self, other: &PatchGrid) -> bool {
        self.height == other.height && self.width == other.width && self.tokens.bit_eq(&other.tokens)
    }

    /// Serialized form, see [`write_grid`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_grid(self, &mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_grid(bytes)
    }
}

/// Flattens a grid into tokens in raster (row-major) order.
pub fn flatten_grid(grid: &PatchGrid) -> Tensor {
    grid.tokens.clone()
}

/// Inverse of [`flatten_grid`].
pub fn reshape_to_grid(tokens: Tensor, height: usize, width: usize) -> Result<PatchGrid> {
    PatchGrid::new(height, width, tokens)
}

pub const GRID_MAGIC: &[u8; 4] = b"PGRD";
pub const GRID_VERSION: u32 = 1;

/// Writes a grid in the on-disk layout:
///
/// ```text
/// offset  size  field
/// 0       4     magic "PGRD"
/// 4       4     version, u32 LE (= 1)
/// 8       4     d, u32 LE
/// 12      4     H', u32 LE
/// 16      4     W', u32 LE
/// 20      4·d·H'·W'  values, f32 LE, index (c·H' + i)·W' + j
/// ```
pub fn write_grid<W: Write>(grid: &PatchGrid, mut w: W) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    for v in [GRID_VERSION, grid.dim() as u32, grid.height as u32, grid.width as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * grid.tokens.len());
    for c in 0..grid.dim() {
        for i in 0..grid.height {
            for j in 0..grid.width {
                buf.extend_from_slice(&(grid.at(c, i, j) as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<PatchGrid> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)?;
    if &header[..4] != GRID_MAGIC {
        return Err(Error::Format("bad grid magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    if word(0) != GRID_VERSION as usize {
        return Err(Error::Format(format!("unsupported grid version {}", word(0))));
    }
    let (d, h, w) = (word(1), word(2), word(3));
    let mut raw = vec![0u8; 4 * d * h * w];
    r.read_exact(&mut raw)?;
    let mut tokens = Tensor::zeros(h * w, d);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let (c, cell) = (k / (h * w), k % (h * w));
        tokens.set(cell, c, v);
    }
    PatchGrid::new(h, w, tokens)
}

/// Row indices of the 3×3 neighbourhood of every cell (zero padding as `None`),
/// neighbours ordered by (dy, dx) in raster order.
pub fn neighbourhood_index(height: usize, width: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(9 * height * width);
    for i in 0..height as isize {
        for j in 0..width as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (y, x) = (i + dy, j + dx);
                    let inside = y >= 0 && x >= 0 && y < height as isize && x < width as isize;
                    idx.push(inside.then(|| (y * width as isize + x) as usize));
                }
            }
        }
    }
    idx
}

/// Toy visual encoder: patch projection, residual 3×3 mixing layers and a
/// learned positional table added last.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub prefix: String,
    pub patch: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub mix_layers: usize,
}

impl ToyEncoder {
    pub fn new(prefix: impl Into<String>, image_size: usize, patch: usize, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            patch,
            dim,
            grid_h: image_size / patch,
            grid_w: image_size / patch,
            mix_layers: 2,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, frozen: bool) {
        let fan_in = 3 * self.patch * self.patch;
        store.insert(
            self.name("proj.w"),
            Tensor::randn(fan_in, self.dim, (1.0 / fan_in as f64).sqrt(), rng),
            frozen,
        );
        store.insert(self.name("proj.b"), Tensor::zeros(1, self.dim), frozen);
        for l in 0..self.mix_layers {
            let fan = 9 * self.dim;
            store.insert(
                self.name(&format!("mix.{l}.w")),
                Tensor::randn(fan, self.dim, 0.5 / (fan as f64).sqrt(), rng),
                frozen,
            );
        }
        store.insert(
            self.name("pos"),
            Tensor::randn(self.grid_h * self.grid_w, self.dim, 0.1, rng),
            frozen,
        );
    }

    /// Encoder forward on a patch tensor already on the tape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let n = self.grid_h * self.grid_w;
        if g.value(patches).shape() != (n, 3 * self.patch * self.patch) {
            return shape_err(format!("encoder input {:?}", g.value(patches).shape()));
        }
        let w = g.param(store, &self.name("proj.w"))?;
        let b = g.param(store, &self.name("proj.b"))?;
        let mut h = g.linear(patches, w, Some(b))?;
        let nbr = Arc::new(neighbourhood_index(self.grid_h, self.grid_w));
        for l in 0..self.mix_layers {
            let wm = g.param(store, &self.name(&format!("mix.{l}.w")))?;
            let gathered = g.gather_rows(h, nbr.clone())?;
            let flat = g.reshape(gathered, n, 9 * self.dim)?;
            let mixed = g.matmul(flat, wm)?;
            let act = g.gelu(mixed);
            h = g.add(h, act)?;
        }
        let pos = g.param(store, &self.name("pos"))?;
        g.add(h, pos)
    }

    pub fn encode(&self, image: &Image, store: &ParamStore) -> Result<PatchGrid> {
        let patches = patchify(image, self.patch)?;
        let mut g = Graph::inference();
        let x = g.constant(patches);
        let out = self.forward(&mut g, store, x)?;
        PatchGrid::new(self.grid_h, self.grid_w, g.value(out).clone())
    }
}

/// Encodes one image with the encoder stored under `encoder.prefix`.
pub fn encode_image(image: &Image, encoder: &ToyEncoder, store: &ParamStore) -> Result<PatchGrid> {
    encoder.encode(image, store)
}

/// Space-to-depth index for a 2×2 stride-2 window: output cell `(i, j)`
/// gathers `(2i+dy, 2j+dx)` for `(dy, dx)` in raster order.
pub fn space_to_depth_index(height: usize, width: usize) -> Result<Vec<Option<usize>>> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample odd grid {height}x{width}"
        )));
    }
    let mut idx = Vec::with_capacity(height * width);
    for i in 0..height / 2 {
        for j in 0..width / 2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    idx.push(Some((2 * i + dy) * width + 2 * j + dx));
                }
            }
        }
    }
    Ok(idx)
}

/// 2×2 convolution with stride 2 and no padding. Weight rows are indexed by
/// `(dy·2 + dx)·d_in + c`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Downsample {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { prefix: prefix.into(), in_dim, out_dim }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/b", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, frozen: bool) {
        let fan = 4 * self.in_dim;
        store.insert(self.weight_name(), Tensor::randn(fan, self.out_dim, (1.0 / fan as f64).sqrt(), rng), frozen);
        store.insert(self.bias_name(), Tensor::zeros(1, self.out_dim), frozen);
    }

    /// Kernel that averages each 2×2 window channel-by-channel (`out_dim == in_dim`).
    pub fn averaging_weight(dim: usize) -> Tensor {
        let mut w = Tensor::zeros(4 * dim, dim);
        for k in 0..4 {
            for c in 0..dim {
                w.set(k * dim + c, c, 0.25);
            }
        }
        w
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, height: usize, width: usize) -> Result<Var> {
        if g.value(tokens).shape() != (height * width, self.in_dim) {
            return shape_err(format!(
                "downsample input {:?} for {height}x{width}x{}",
                g.value(tokens).shape(),
                self.in_dim
            ));
        }
        let idx = Arc::new(space_to_depth_index(height, width)?);
        let gathered = g.gather_rows(tokens, idx)?;
        let flat = g.reshape(gathered, height * width / 4, 4 * self.in_dim)?;
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.linear(flat, w, Some(b))
    }
}

pub fn downsample_grid(grid: &PatchGrid, conv: &Downsample, store: &ParamStore) -> Result<PatchGrid> {
    if grid.dim() != conv.in_dim {
        return shape_err(format!("grid width {} for conv input {}", grid.dim(), conv.in_dim));
    }
    let mut g = Graph::inference();
    let x = g.constant(grid.tokens.clone());
    let y = conv.forward(&mut g, store, x, grid.height, grid.width)?;
    PatchGrid::new(grid.height / 2, grid.width / 2, g.value(y).clone())
}

/// Average-pools a grid by an integer factor in both directions.
pub fn pool_grid(grid: &PatchGrid, factor: usize) -> Result<PatchGrid> {
    if factor == 0 || !grid.height.is_multiple_of(factor) || !grid.width.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {}x{} by {factor}",
            grid.height, grid.width
        )));
    }
    let (h, w) = (grid.height / factor, grid.width / factor);
    let d = grid.dim();
    let mut out = Tensor::zeros(h * w, d);
    let inv = 1.0 / (factor * factor) as f64;
    for i in 0..grid.height {
        for j in 0..grid.width {
            let dst = out.row_mut((i / factor) * w + j / factor);
            for (o, v) in dst.iter_mut().zip(grid.cell(i * grid.width + j)) {
                *o += v * inv;
            }
        }
    }
    PatchGrid::new(h, w, out)
}

/// Nearest-neighbour upsampling: every cell becomes a `factor × factor` block.
pub fn upsample_grid(grid: &PatchGrid, factor: usize) -> Result<PatchGrid> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be positive".into()));
    }
    let (h, w) = (grid.height * factor, grid.width * factor);
    let mut out = Tensor::zeros(h * w, grid.dim());
    for i in 0..h {
        for j in 0..w {
            out.row_mut(i * w + j).copy_from_slice(grid.cell((i / factor) * grid.width + j / factor));
        }
    }
    PatchGrid::new(h, w, out)
}

/// Boolean plane marking substituted cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlane {
    pub height: usize,
    pub width: usize,
    pub masked: Vec<bool>,
}

impl MaskPlane {
    pub fn none(height: usize, width: usize) -> Self {
        Self { height, width, masked: vec![false; height * width] }
    }

    pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Result<Self> {
        let mut plane = Self::none(height, width);
        for &i in indices {
            if i >= plane.masked.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask index {i} outside {height}x{width} grid"
                )));
            }
            if plane.masked[i] {
                return Err(Error::InvalidArgument(format!("duplicate mask index {i}")));
            }
            plane.masked[i] = true;
        }
        Ok(plane)
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Replaces the listed cells with the mask embedding.
pub fn substitute_masks(grid: &PatchGrid, mask_set: &[usize], mask_token: &[f64]) -> Result<(PatchGrid, MaskPlane)> {
    if mask_token.len() != grid.dim() {
        return shape_err(format!("mask token width {} for grid width {}", mask_token.len(), grid.dim()));
    }
    let plane = MaskPlane::from_indices(grid.height, grid.width, mask_set)?;
    let mut tokens = grid.tokens.clone();
    for &i in mask_set {
        tokens.row_mut(i).copy_from_slice(mask_token);
    }
    Ok((PatchGrid { height: grid.height, width: grid.width, tokens }, plane))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        let px = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
        Image::new(size, size, px).unwrap()
    }

    fn default_encoder(seed: u64) -> (ToyEncoder, ParamStore) {
        let enc = ToyEncoder::new("encoder", 32, 4, 16);
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), true);
        (enc, store)
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (enc, store) = default_encoder(0);
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 32);
        let a = encode_image(&img, &enc, &store).unwrap();
        assert_eq!((a.dim(), a.height(), a.width()), (16, 8, 8));
        let b = encode_image(&img, &enc, &store).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn encode_rejects_indivisible_images() {
        let (enc, store) = default_encoder(0);
        let img = Image::filled(30, 32, [0.5; 3]);
        assert!(matches!(encode_image(&img, &enc, &store), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_projection_yields_positional_table() {
        let (enc, mut store) = default_encoder(3);
        *store.tensor_mut("encoder/proj.w").unwrap() = Tensor::zeros(48, 16);
        let img = Image::filled(32, 32, [0.0; 3]);
        let grid = encode_image(&img, &enc, &store).unwrap();
        assert!(grid.tokens().bit_eq(store.get("encoder/pos").unwrap()));
    }

    #[test]
    fn single_patch_change_stays_inside_receptive_field() {
        let (enc, store) = default_encoder(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 32);
        let base = encode_image(&img, &enc, &store).unwrap();
        // Perturb every pixel of patch (3, 5) and record which cells move.
        let mut pert = img.clone();
        for c in 0..3 {
            for y in 12..16 {
                for x in 20..24 {
                    pert.set(c, y, x, 1.0 - img.get(c, y, x));
                }
            }
        }
        let moved = encode_image(&pert, &enc, &store).unwrap();
        for i in 0..8usize {
            for j in 0..8usize {
                let changed = base.cell(i * 8 + j) != moved.cell(i * 8 + j);
                // Two 3x3 mixing layers give a Chebyshev radius of 2.
                let inside = i.abs_diff(3) <= 2 && j.abs_diff(5) <= 2;
                if !inside {
                    assert!(!changed, "cell ({i},{j}) outside receptive field changed");
                }
            }
        }
        assert!(base.cell(3 * 8 + 5) != moved.cell(3 * 8 + 5));
    }

    #[test]
    fn raster_order_convention() {
        let tokens = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]).unwrap();
        let grid = reshape_to_grid(tokens, 2, 2).unwrap();
        assert_eq!(grid.at(0, 0, 1), 1.0);
        assert_eq!(grid.at(0, 1, 0), 10.0);
        assert_eq!(flatten_grid(&grid).data(), &[0.0, 1.0, 10.0, 11.0]);
        let one = reshape_to_grid(Tensor::full(1, 3, 2.0), 1, 1).unwrap();
        assert!(reshape_to_grid(flatten_grid(&one), 1, 1).unwrap().bit_eq(&one));
        assert!(reshape_to_grid(Tensor::zeros(3, 2), 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn flatten_reshape_round_trip(h in 1usize..9, w in 1usize..9, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = PatchGrid::new(h, w, Tensor::randn(h * w, d, 1.0, &mut rng)).unwrap();
            let back = reshape_to_grid(flatten_grid(&grid), h, w).unwrap();
            prop_assert!(back.bit_eq(&grid));
        }

        #[test]
        fn substitution_changes_exactly_the_mask(seed in any::<u64>(), k in 0usize..17) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = PatchGrid::new(4, 4, Tensor::randn(16, 3, 1.0, &mut rng)).unwrap();
            let mut cells: Vec<usize> = (0..16).collect();
            rand::seq::SliceRandom::shuffle(cells.as_mut_slice(), &mut rng);
            let set = &cells[..k];
            let token = [7.0, 7.0, 7.0];
            let (out, plane) = substitute_masks(&grid, set, &token).unwrap();
            let changed: Vec<bool> = (0..16).map(|i| out.cell(i) != grid.cell(i)).collect();
            prop_assert_eq!(&changed, &plane.masked);
            prop_assert_eq!(plane.count(), k);
        }
    }

    /// Direct nested-loop 2x2 stride-2 convolution.
    fn conv_oracle(grid: &PatchGrid, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (d, h, wd) = (grid.dim(), grid.height(), grid.width());
        let out_dim = w.cols();
        let mut out = vec![0.0; (h / 2) * (wd / 2) * out_dim];
        for i in 0..h / 2 {
            for j in 0..wd / 2 {
                for o in 0..out_dim {
                    let mut acc = b.get(0, o);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for c in 0..d {
                                acc += w.get((dy * 2 + dx) * d + c, o) * grid.at(c, 2 * i + dy, 2 * j + dx);
                            }
                        }
                    }
                    out[(i * (wd / 2) + j) * out_dim + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn downsample_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Downsample::new("down", 16, 12);
        let mut store = ParamStore::new();
        conv.init(&mut store, &mut rng, false);
        *store.tensor_mut("down/b").unwrap() = Tensor::randn(1, 12, 1.0, &mut rng);
        let grid = PatchGrid::new(8, 8, Tensor::randn(64, 16, 1.0, &mut rng)).unwrap();
        let out = downsample_grid(&grid, &conv, &store).unwrap();
        assert_eq!((out.dim(), out.height(), out.width()), (12, 4, 4));
        let expect = conv_oracle(&grid, store.get("down/w").unwrap(), store.get("down/b").unwrap());
        for (a, e) in out.tokens().data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0));
        }
    }

    #[test]
    fn averaging_kernel_preserves_constants() {
        let conv = Downsample::new("down", 16, 16);
        let mut store = ParamStore::new();
        store.insert("down/w", Downsample::averaging_weight(16), false);
        store.insert("down/b", Tensor::zeros(1, 16), false);
        let grid = PatchGrid::new(8, 8, Tensor::full(64, 16, 0.37)).unwrap();
        let out = downsample_grid(&grid, &conv, &store).unwrap();
        assert!(out.tokens().data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        let odd = PatchGrid::new(3, 4, Tensor::zeros(12, 16)).unwrap();
        assert!(matches!(downsample_grid(&odd, &conv, &store), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mask_substitution_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = PatchGrid::new(4, 4, Tensor::randn(16, 4, 1.0, &mut rng)).unwrap();
        let m = [9.0, 8.0, 7.0, 6.0];
        let (same, plane) = substitute_masks(&grid, &[], &m).unwrap();
        assert!(same.bit_eq(&grid));
        assert_eq!(plane.count(), 0);
        let all: Vec<usize> = (0..16).collect();
        let (full, plane) = substitute_masks(&grid, &all, &m).unwrap();
        assert!((0..16).all(|i| full.cell(i) == m));
        assert_eq!(plane.count(), 16);
        let (part, _) = substitute_masks(&grid, &[1, 5, 14], &m).unwrap();
        let equal_m = (0..16).filter(|&i| part.cell(i) == m).count();
        let preserved = (0..16).filter(|&i| part.cell(i) == grid.cell(i)).count();
        assert_eq!((equal_m, preserved), (3, 13));
        assert!(substitute_masks(&grid, &[16], &m).is_err());
        assert!(substitute_masks(&grid, &[2, 2], &m).is_err());
    }

    #[test]
    fn grid_bytes_round_trip_through_f32() {
        let tokens = Tensor::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0], vec![2.0, 8.0]]).unwrap();
        let grid = PatchGrid::new(1, 3, tokens).unwrap();
        let bytes = grid.to_bytes();
        assert_eq!(&bytes[..4], b"PGRD");
        assert_eq!(bytes.len(), 20 + 4 * 6);
        // channel 0 of cell (0, 1) is the second stored value
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 3.0);
        assert!(PatchGrid::from_bytes(&bytes).unwrap().bit_eq(&grid));
        assert!(PatchGrid::from_bytes(b"NOPE0000000000000000").is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(6), 8);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), (4, 48));
        assert_eq!(unpatchify(&p, 2, 2, 4).unwrap(), img);
    }

    #[test]
    fn upsampling_repeats_cells_and_pooling_undoes_it() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let grid = PatchGrid::new(2, 3, Tensor::randn(6, 4, 1.0, &mut rng)).unwrap();
        let up = upsample_grid(&grid, 2).unwrap();
        assert_eq!((up.height(), up.width()), (4, 6));
        assert_eq!(up.cell(2 * 6 + 5), grid.cell(3 + 2));
        assert!(pool_grid(&up, 2).unwrap().bit_eq(&grid));
        assert!(upsample_grid(&grid, 1).unwrap().bit_eq(&grid));
        assert!(upsample_grid(&grid, 0).is_err());
    }

    #[test]
    fn pooling_averages_blocks() {
        let tokens = Tensor::from_vec(16, 1, (0..16).map(f64::from).collect()).unwrap();
        let grid = PatchGrid::new(4, 4, tokens).unwrap();
        let pooled = pool_grid(&grid, 2).unwrap();
        assert_eq!(pooled.tokens().data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
