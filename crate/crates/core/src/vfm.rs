//! Frozen foundation-model token features, depth fusion, token-aware
//! attention pooling and attention statistics.

use std::fs;
use std::path::{Path, PathBuf};

use irkd_autograd::{softmax_slice, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::Frame;

pub const STUB_PATCH: usize = 16;
pub const STUB_DIM: usize = 384;
pub const STUB_BLOCKS: usize = 12;
const STUB_SEED: u64 = 0x5EED_0F_D1_0E5;

/// Per-block patch-token matrices of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// `(K, N, d)`.
    pub blocks: Tensor,
    pub patch_grid: (usize, usize),
    pub provider_id: String,
}

impl TokenFeatures {
    pub fn new(
        blocks: Tensor,
        patch_grid: (usize, usize),
        provider_id: impl Into<String>,
    ) -> Result<Self> {
        if blocks.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "token blocks must be (K, N, d), got {:?}",
                blocks.shape()
            )));
        }
        let (k, n) = (blocks.shape()[0], blocks.shape()[1]);
        if k == 0 {
            return Err(Error::Shape(
                "token features need at least one block".into(),
            ));
        }
        if patch_grid.0 * patch_grid.1 != n {
            return Err(Error::Shape(format!(
                "patch grid {patch_grid:?} does not hold {n} tokens"
            )));
        }
        if !blocks.all_finite() {
            return Err(Error::numeric("token features", "non-finite token entries"));
        }
        Ok(Self {
            blocks,
            patch_grid,
            provider_id: provider_id.into(),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.blocks.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.blocks.shape()[2]
    }

    /// `N × d` matrix of block `k`.
    pub fn block(&self, k: usize) -> &[f64] {
        self.blocks.outer(k)
    }
}

/// Source of frozen token features. Implementations must never mutate their
/// parameters; `checksum` lets callers verify that.
pub trait FeatureProvider {
    fn id(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn num_blocks(&self) -> usize;
    fn dim(&self) -> usize;
    fn extract(&self, image: &Frame, image_id: &str) -> Result<TokenFeatures>;
    fn checksum(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Stub,
    Dinov3,
}

/// Reflection-pad a frame on the bottom/right so both sides are multiples of `patch`.
pub fn reflect_pad(image: &Frame, patch: usize) -> Frame {
    let (h, w) = image.shape();
    let ph = h.div_ceil(patch) * patch;
    let pw = w.div_ceil(patch) * patch;
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mirror = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            (2 * n).saturating_sub(2 + i).min(n - 1)
        }
    };
    let mut out = Frame::filled(ph, pw, 0.0);
    for r in 0..ph {
        for c in 0..pw {
            out.set(r, c, image.get(mirror(r, h), mirror(c, w)));
        }
    }
    out
}

/// Flattened non-overlapping patches, row-major over the patch grid: `(N, p²)`.
pub fn patchify(image: &Frame, patch: usize) -> (Tensor, (usize, usize)) {
    let padded = reflect_pad(image, patch);
    let (rows, cols) = (padded.height() / patch, padded.width() / patch);
    let mut data = Vec::with_capacity(rows * cols * patch * patch);
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..patch {
                for c in 0..patch {
                    data.push(padded.get(pr * patch + r, pc * patch + c));
                }
            }
        }
    }
    (
        Tensor::new(&[rows * cols, patch * patch], data),
        (rows, cols),
    )
}

/// Deterministic stand-in for a ViT: each patch is projected by a fixed
/// random matrix per block, plus a fixed bias, then squashed with `tanh`.
pub struct StubProvider {
    patch: usize,
    projections: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
}

impl Default for StubProvider {
    fn default() -> Self {
        Self::new(STUB_PATCH, STUB_DIM, STUB_BLOCKS)
    }
}

impl StubProvider {
    pub fn new(patch: usize, dim: usize, blocks: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED);
        let p2 = patch * patch;
        let w = Normal::new(0.0, 1.0 / (p2 as f64).sqrt()).expect("valid sigma");
        let b = Normal::new(0.0, 0.1).expect("valid sigma");
        let mut projections = Vec::with_capacity(blocks);
        let mut biases = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            projections.push(Tensor::new(
                &[p2, dim],
                (0..p2 * dim).map(|_| w.sample(&mut rng)).collect(),
            ));
            biases.push((0..dim).map(|_| b.sample(&mut rng)).collect());
        }
        Self {
            patch,
            projections,
            biases,
        }
    }

    pub fn bias(&self, block: usize) -> &[f64] {
        &self.biases[block]
    }
}

impl FeatureProvider for StubProvider {
    fn id(&self) -> &str {
        "stub"
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn num_blocks(&self) -> usize {
        self.projections.len()
    }

    fn dim(&self) -> usize {
        self.biases[0].len()
    }

    fn extract(&self, image: &Frame, _image_id: &str) -> Result<TokenFeatures> {
        let (patches, grid) = patchify(image, self.patch);
        let n = grid.0 * grid.1;
        let d = self.dim();
        let mut data = Vec::with_capacity(self.num_blocks() * n * d);
        for (proj, bias) in self.projections.iter().zip(&self.biases) {
            let z = patches.matmul(proj);
            for (i, v) in z.data().iter().enumerate() {
                data.push((v + bias[i % d]).tanh());
            }
        }
        TokenFeatures::new(
            Tensor::new(&[self.num_blocks(), n, d], data),
            grid,
            self.id(),
        )
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (p, b) in self.projections.iter().zip(&self.biases) {
            for v in p.data().iter().chain(b) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CacheHeader {
    blocks: usize,
    tokens: usize,
    dim: usize,
    patch_grid: [usize; 2],
}

/// Token cache: `<root>/<provider_id>/<image_id>.f32` holds little-endian
/// 32-bit floats in `(K, N, d)` order, `<image_id>.json` the shape header.
#[derive(Clone, Debug)]
pub struct TokenCache {
    root: PathBuf,
}

impl TokenCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn paths(&self, provider_id: &str, image_id: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join(provider_id);
        (
            dir.join(format!("{image_id}.f32")),
            dir.join(format!("{image_id}.json")),
        )
    }

    pub fn save(&self, image_id: &str, tokens: &TokenFeatures) -> Result<()> {
        let (data_path, header_path) = self.paths(&tokens.provider_id, image_id);
        let dir = data_path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CacheHeader {
            blocks: tokens.num_blocks(),
            tokens: tokens.num_tokens(),
            dim: tokens.dim(),
            patch_grid: [tokens.patch_grid.0, tokens.patch_grid.1],
        };
        let bytes: Vec<u8> = tokens
            .blocks
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
        fs::write(&header_path, serde_json::to_string(&header)?)
            .map_err(|e| Error::io(&header_path, e))
    }

    pub fn load(&self, provider_id: &str, image_id: &str) -> Result<Option<TokenFeatures>> {
        let (data_path, header_path) = self.paths(provider_id, image_id);
        if !header_path.exists() {
            return Ok(None);
        }
        let header: CacheHeader = serde_json::from_str(
            &fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?,
        )?;
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let expected = header.blocks * header.tokens * header.dim;
        if bytes.len() != 4 * expected {
            return Err(Error::Data(format!(
                "token cache {} holds {} bytes, header expects {}",
                data_path.display(),
                bytes.len(),
                4 * expected
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let blocks = Tensor::new(&[header.blocks, header.tokens, header.dim], data);
        TokenFeatures::new(
            blocks,
            (header.patch_grid[0], header.patch_grid[1]),
            provider_id,
        )
        .map(Some)
    }
}

/// DINOv3 ViT-S+/16 adapter. Token features (last 12 blocks, patch tokens
/// only) are exported ahead of time into a [`TokenCache`]; this provider
/// serves them and reports an error for images that were not exported.
pub struct CachedProvider {
    id: String,
    cache: TokenCache,
    patch: usize,
    blocks: usize,
    dim: usize,
}

impl CachedProvider {
    pub const DINOV3_ID: &'static str = "dinov3-vits16plus";

    pub fn dinov3(cache_root: &Path) -> Result<Self> {
        let dir = cache_root.join(Self::DINOV3_ID);
        if !dir.is_dir() {
            return Err(Error::Provider(format!(
                "DINOv3 tokens are not available: expected exported features under {}",
                dir.display()
            )));
        }
        Ok(Self {
            id: Self::DINOV3_ID.into(),
            cache: TokenCache::new(cache_root),
            patch: 16,
            blocks: 12,
            dim: 384,
        })
    }
}

impl FeatureProvider for CachedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn patch_size(&self) -> usize {
        self.patch
    }

    fn num_blocks(&self) -> usize {
        self.blocks
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, _image: &Frame, image_id: &str) -> Result<TokenFeatures> {
        self.cache.load(&self.id, image_id)?.ok_or_else(|| {
            Error::Provider(format!(
                "no exported {} tokens for image '{image_id}'",
                self.id
            ))
        })
    }

    fn checksum(&self) -> String {
        // Weights live outside this process.
        self.id.clone()
    }
}

/// Resolve the configured provider. With `fallback_to_stub`, an unavailable
/// DINOv3 export degrades to the stub instead of failing.
pub fn make_provider(
    kind: ProviderKind,
    cache_root: &Path,
    fallback_to_stub: bool,
) -> Result<Box<dyn FeatureProvider>> {
    match kind {
        ProviderKind::Stub => Ok(Box::new(StubProvider::default())),
        ProviderKind::Dinov3 => match CachedProvider::dinov3(cache_root) {
            Ok(p) => Ok(Box::new(p)),
            Err(e) if fallback_to_stub => {
                log::warn!("{e}; falling back to the stub provider");
                Ok(Box::new(StubProvider::default()))
            }
            Err(e) => Err(e),
        },
    }
}

/// Learnable depth-fusion logits; the weights are their softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub logits: Vec<f64>,
}

impl FusionWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            logits: vec![0.0; k],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax_slice(&self.logits)
    }
}

/// `Σ_k π_k F^(k)` as an `N × d` row-major matrix.
pub fn fuse_depths(tokens: &TokenFeatures, fw: &FusionWeights) -> Result<Vec<f64>> {
    let k = tokens.num_blocks();
    if fw.logits.len() != k {
        return Err(Error::Shape(format!(
            "{} fusion weights for {k} token blocks",
            fw.logits.len()
        )));
    }
    let pi = fw.weights();
    let nd = tokens.num_tokens() * tokens.dim();
    let mut out = vec![0.0; nd];
    for (b, &p) in pi.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(tokens.block(b)) {
            *o += p * v;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapHead {
    pub w: Vec<f64>,
}

/// Token-aware attention pooling of an `N × d` matrix. Returns the pooled
/// vector and the attention over tokens.
pub fn tap_pool(f: &[f64], n: usize, head: &TapHead) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = head.w.len();
    if n == 0 {
        return Err(Error::Shape(
            "attention pooling needs at least one token".into(),
        ));
    }
    if f.len() != n * d {
        return Err(Error::Shape(format!(
            "token matrix has {} values, expected {n}x{d}",
            f.len()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("tap_pool", "non-finite token entries"));
    }
    let scores: Vec<f64> = f
        .chunks_exact(d)
        .map(|t| t.iter().zip(&head.w).map(|(a, b)| a * b).sum())
        .collect();
    let a = softmax_slice(&scores);
    let mut g = vec![0.0; d];
    for (t, &aj) in f.chunks_exact(d).zip(&a) {
        for (gi, &v) in g.iter_mut().zip(t) {
            *gi += aj * v;
        }
    }
    Ok((g, a))
}

/// Entropy-based concentration statistics of an attention vector, as
/// fractions (multiply by 100 for percentages).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub h_norm: f64,
    pub eff_n: f64,
    pub p_max: f64,
}

pub fn attention_stats(a: &[f64]) -> Result<AttentionStats> {
    if a.is_empty() {
        return Err(Error::Domain("empty attention vector".into()));
    }
    let total: f64 = a.iter().sum();
    if a.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(
            "attention is not a probability vector".into(),
        ));
    }
    let h: f64 = a.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    let n = a.len();
    let h_norm = if n == 1 {
        0.0
    } else {
        (h / (n as f64).ln()).clamp(0.0, 1.0)
    };
    let eff_n = h.exp().clamp(1.0, n as f64);
    let p_max = a.iter().cloned().fold(0.0, f64::max);
    Ok(AttentionStats {
        h_norm,
        eff_n,
        p_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn stub_shapes_for_64_square() {
        let p = StubProvider::default();
        let img = Frame::filled(64, 64, 0.3);
        let t = p.extract(&img, "x").unwrap();
        assert_eq!((t.num_blocks(), t.num_tokens(), t.dim()), (12, 16, 384));
        assert_eq!(t.patch_grid, (4, 4));
    }

    #[test]
    fn stub_zero_image_yields_bias_response() {
        let p = StubProvider::default();
        let t = p.extract(&Frame::filled(32, 48, 0.0), "z").unwrap();
        assert_eq!(t.patch_grid, (2, 3));
        for k in 0..t.num_blocks() {
            let expect: Vec<f64> = p.bias(k).iter().map(|b| b.tanh()).collect();
            for tok in t.block(k).chunks_exact(t.dim()) {
                assert_eq!(tok, expect.as_slice());
            }
        }
    }

    #[test]
    fn reflection_pad_mirrors_without_repeating_edge() {
        let img = Frame::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&img, 4);
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.get(0, 3), 2.0);
        assert_eq!(p.get(2, 0), 1.0);
    }

    #[test]
    fn fuse_two_blocks_by_hand() {
        let blocks = Tensor::new(&[2, 1, 1], vec![1.0, 5.0]);
        let t = TokenFeatures::new(blocks, (1, 1), "t").unwrap();
        let fw = FusionWeights {
            logits: vec![0.0, 3f64.ln()],
        };
        let w = fw.weights();
        assert!(close(w[0], 0.25, 1e-12) && close(w[1], 0.75, 1e-12));
        assert!(close(fuse_depths(&t, &fw).unwrap()[0], 4.0, 1e-12));
        assert!(matches!(
            fuse_depths(&t, &FusionWeights::uniform(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tap_three_tokens_by_hand() {
        let f = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let (g, a) = tap_pool(&f, 3, &TapHead { w: vec![1.0, 0.0] }).unwrap();
        // a = (e, 1, e) / (2e + 1)
        let e = 1f64.exp();
        let z = 2.0 * e + 1.0;
        assert!(
            close(a[0], e / z, 1e-12) && close(a[1], 1.0 / z, 1e-12) && close(a[2], e / z, 1e-12)
        );
        assert!(close(a[0], 0.42232, 1e-5) && close(a[1], 0.15536, 1e-5));
        assert!(close(g[0], 0.84464, 1e-5) && close(g[1], 0.57768, 1e-5));
    }

    #[test]
    fn tap_with_zero_scorer_is_average_pooling() {
        let f = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let (g, a) = tap_pool(&f, 3, &TapHead { w: vec![0.0, 0.0] }).unwrap();
        assert!(a.iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));
        assert!(close(g[0], 3.0, 1e-12) && close(g[1], 5.0, 1e-12));
        let (g1, _) = tap_pool(&[7.0, 8.0], 1, &TapHead { w: vec![0.3, -1.0] }).unwrap();
        assert_eq!(g1, vec![7.0, 8.0]);
        assert!(matches!(
            tap_pool(&[f64::NAN, 0.0], 1, &TapHead { w: vec![0.0, 0.0] }),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn attention_statistics_reference_cases() {
        let u = attention_stats(&[0.25; 4]).unwrap();
        assert!(
            close(u.h_norm, 1.0, 1e-12) && close(u.eff_n, 4.0, 1e-12) && close(u.p_max, 0.25, 0.0)
        );
        let one = attention_stats(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!((one.h_norm, one.eff_n, one.p_max), (0.0, 1.0, 1.0));
        let half = attention_stats(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(close(half.h_norm, 2f64.ln() / 4f64.ln(), 1e-12) && close(half.h_norm, 0.5, 1e-12));
        assert!(close(half.eff_n, 2.0, 1e-12) && half.p_max == 0.5);
        assert_eq!(attention_stats(&[1.0]).unwrap().h_norm, 0.0);
        assert!(attention_stats(&[0.3, 0.3]).is_err());
    }
}
