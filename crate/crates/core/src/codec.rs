//! Encoder/decoder boundary and Hann-window tiled decoding.

use ndarray::s;

use crate::error::{Error, Result};
use crate::schedule::Patch;

/// A latent codec. `factor` is the spatial upscaling of `decode`.
pub trait Codec: Sync {
    fn encode(&self, x: &Patch) -> Result<Patch>;
    fn decode(&self, latent: &Patch) -> Result<Patch>;
    fn factor(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, x: &Patch) -> Result<Patch> {
        Ok(x.clone())
    }

    fn decode(&self, latent: &Patch) -> Result<Patch> {
        Ok(latent.clone())
    }
}

/// Pixelwise scaling: `decode(z) = scale * z`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleCodec {
    pub scale: f64,
}

impl Codec for ScaleCodec {
    fn encode(&self, x: &Patch) -> Result<Patch> {
        if self.scale == 0.0 {
            return Err(Error::InvalidArgument("zero scale cannot be inverted".into()));
        }
        Ok(x / self.scale)
    }

    fn decode(&self, latent: &Patch) -> Result<Patch> {
        Ok(latent * self.scale)
    }
}

/// One tile of one of the four shifted tilings, in latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HannTile {
    /// Configuration index 0..4: offsets (0,0), (0,w/2), (h/2,0), (h/2,w/2).
    pub config: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    /// Unclamped origin; the window is laid out relative to it.
    nominal_row: isize,
    nominal_col: isize,
}

/// `[start, end)` spans of a tiling with period `tile` shifted by `offset`,
/// clamped to `[0, len)`, with the nominal start of each span.
fn spans(len: usize, tile: usize, offset: usize) -> Vec<(usize, usize, isize)> {
    let mut out = Vec::new();
    let mut nominal = offset as isize - if offset > 0 { tile as isize } else { 0 };
    while nominal < len as isize {
        let a = nominal.max(0) as usize;
        let b = ((nominal + tile as isize) as usize).min(len);
        if b > a {
            out.push((a, b, nominal));
        }
        nominal += tile as isize;
    }
    out
}

/// All tiles of the four configurations, configuration-major.
pub fn hann_tiles(height: usize, width: usize, tile_h: usize, tile_w: usize) -> Result<Vec<HannTile>> {
    if tile_h == 0 || tile_w == 0 || !tile_h.is_multiple_of(2) || !tile_w.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "tile {tile_h}x{tile_w} must be even and non-empty"
        )));
    }
    if tile_h > height || tile_w > width {
        return Err(Error::InvalidArgument(format!(
            "tile {tile_h}x{tile_w} exceeds the {height}x{width} latent"
        )));
    }
    // an axis the tile already spans is not shifted
    let (sh, sw) = (
        if tile_h < height { tile_h / 2 } else { 0 },
        if tile_w < width { tile_w / 2 } else { 0 },
    );
    let offsets = [(0, 0), (0, sw), (sh, 0), (sh, sw)];
    let mut tiles = Vec::new();
    for (config, &(oy, ox)) in offsets.iter().enumerate() {
        for (r0, r1, nr) in spans(height, tile_h, oy) {
            for (c0, c1, nc) in spans(width, tile_w, ox) {
                tiles.push(HannTile {
                    config,
                    row0: r0,
                    col0: c0,
                    rows: r1 - r0,
                    cols: c1 - c0,
                    nominal_row: nr,
                    nominal_col: nc,
                });
            }
        }
    }
    Ok(tiles)
}

/// Hann weights along one axis of a tile, in output coordinates. Sides that
/// touch the canvas boundary are flat.
fn axis_weights(start: usize, count: usize, nominal: isize, period: usize, len: usize, factor: usize) -> Vec<f64> {
    let k_len = period * factor;
    let first = start as isize * factor as isize;
    let nominal = nominal * factor as isize;
    let at_lo = start == 0;
    let at_hi = start + count == len;
    (0..count * factor)
        .map(|i| {
            let k = (first + i as isize - nominal) as f64;
            let in_lo_half = k < k_len as f64 / 2.0;
            if (at_lo && in_lo_half) || (at_hi && !in_lo_half) {
                1.0
            } else {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * (k + 0.5) / k_len as f64).cos())
            }
        })
        .collect()
}

/// Decode `latent` tile by tile with four half-shifted tilings blended by
/// Hann windows.
pub fn hann_decode(latent: &Patch, codec: &dyn Codec, tile_h: usize, tile_w: usize) -> Result<Patch> {
    let (_, h, w) = latent.dim();
    let tiles = hann_tiles(h, w, tile_h, tile_w)?;
    let order: Vec<usize> = (0..tiles.len()).collect();
    decode_tiles(latent, codec, tile_h, tile_w, &tiles, &order)
}

/// As [`hann_decode`], visiting tiles in `order` (a permutation of the tile
/// list from [`hann_tiles`]). The result does not depend on the order.
pub fn hann_decode_ordered(
    latent: &Patch,
    codec: &dyn Codec,
    tile_h: usize,
    tile_w: usize,
    order: &[usize],
) -> Result<Patch> {
    let (_, h, w) = latent.dim();
    let tiles = hann_tiles(h, w, tile_h, tile_w)?;
    let mut seen = vec![false; tiles.len()];
    for &i in order {
        if i >= tiles.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument("tile order is not a permutation".into()));
        }
    }
    if order.len() != tiles.len() {
        return Err(Error::InvalidArgument("tile order is not a permutation".into()));
    }
    decode_tiles(latent, codec, tile_h, tile_w, &tiles, order)
}

fn decode_tiles(
    latent: &Patch,
    codec: &dyn Codec,
    tile_h: usize,
    tile_w: usize,
    tiles: &[HannTile],
    order: &[usize],
) -> Result<Patch> {
    let (_, h, w) = latent.dim();
    let f = codec.factor();
    let mut channels = None;
    // One plane per configuration: tiles within a configuration are
    // disjoint, so each pixel is written once per plane whatever the order.
    let mut num: Vec<Option<Patch>> = vec![None, None, None, None];
    let mut den = vec![ndarray::Array2::<f64>::zeros((h * f, w * f)); 4];
    for &i in order {
        let t = &tiles[i];
        let sub = latent
            .slice(s![.., t.row0..t.row0 + t.rows, t.col0..t.col0 + t.cols])
            .to_owned();
        let decoded = codec.decode(&sub)?;
        let (c, dh, dw) = decoded.dim();
        if (dh, dw) != (t.rows * f, t.cols * f) || *channels.get_or_insert(c) != c {
            return Err(Error::shape(&[c, t.rows * f, t.cols * f], decoded.shape()));
        }
        let wr = axis_weights(t.row0, t.rows, t.nominal_row, tile_h, h, f);
        let wc = axis_weights(t.col0, t.cols, t.nominal_col, tile_w, w, f);
        let plane = num[t.config].get_or_insert_with(|| Patch::zeros((c, h * f, w * f)));
        for r in 0..dh {
            for q in 0..dw {
                let wt = wr[r] * wc[q];
                let (y, x) = (t.row0 * f + r, t.col0 * f + q);
                den[t.config][[y, x]] = wt;
                for k in 0..c {
                    plane[[k, y, x]] = wt * decoded[[k, r, q]];
                }
            }
        }
    }
    let c = channels.unwrap_or(0);
    let mut out = Patch::zeros((c, h * f, w * f));
    for y in 0..h * f {
        for x in 0..w * f {
            let total: f64 = den.iter().map(|d| d[[y, x]]).sum();
            if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::InvariantBreach(format!("zero Hann weight at ({y}, {x})")));
            }
            for k in 0..c {
                let acc: f64 = num.iter().flatten().map(|p| p[[k, y, x]]).sum();
                out[[k, y, x]] = acc / total;
            }
        }
    }
    Ok(out)
}
