//! Spatial augmentation: quarter-turn rotations and flips, applied
//! identically to every channel and to the label grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::patch::{LabelMask, MultispectralPatch, BANDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Transform {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        flip_h: false,
        flip_v: false,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4),
            flip_h: rng.random(),
            flip_v: rng.random(),
        }
    }

    /// Output extent for an `h x w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel `(y, x)` of output pixel `(oy, ox)` for an `h x w` input.
    /// Flips act first, then the rotation.
    pub fn source(&self, oy: usize, ox: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x) = (oy, ox);
        let (mut ch, mut cw) = self.out_dims(h, w);
        for _ in 0..self.quarter_turns % 4 {
            // one ccw turn: out[y][x] = in[x][ch - 1 - y], where the input
            // grid has ch columns
            let (sy, sx) = (x, ch - 1 - y);
            y = sy;
            x = sx;
            std::mem::swap(&mut ch, &mut cw);
        }
        if self.flip_v {
            y = h - 1 - y;
        }
        if self.flip_h {
            x = w - 1 - x;
        }
        (y, x)
    }

    /// Applies the transform to `channels` stacked `h x w` grids.
    pub fn apply<T: Copy>(&self, data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.out_dims(h, w);
        let n = h * w;
        let mut map = Vec::with_capacity(n);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = self.source(oy, ox, h, w);
                map.push(y * w + x);
            }
        }
        let mut out = Vec::with_capacity(data.len());
        for c in 0..channels {
            let plane = &data[c * n..(c + 1) * n];
            out.extend(map.iter().map(|&i| plane[i]));
        }
        out
    }
}

/// Draws one transform from `seed` and applies it to both patch and mask.
pub fn augment(
    patch: &MultispectralPatch,
    mask: &LabelMask,
    seed: u64,
) -> (MultispectralPatch, LabelMask) {
    let t = Transform::random(&mut ChaCha8Rng::seed_from_u64(seed));
    apply_pair(&t, patch, mask)
}

pub fn apply_pair(
    t: &Transform,
    patch: &MultispectralPatch,
    mask: &LabelMask,
) -> (MultispectralPatch, LabelMask) {
    let (h, w) = (patch.height, patch.width);
    let (oh, ow) = t.out_dims(h, w);
    let mut p = patch.clone();
    p.height = oh;
    p.width = ow;
    p.data = t.apply(&patch.data, BANDS, h, w);
    let m = LabelMask {
        height: oh,
        width: ow,
        codes: t.apply(&mask.codes, 1, h, w),
    };
    (p, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_turn_moves_top_right_to_top_left() {
        // 2x3 grid
        // a b c
        // d e f
        // one ccw turn gives 3x2
        // c f
        // b e
        // a d
        let g = ['a', 'b', 'c', 'd', 'e', 'f'];
        let t = Transform {
            quarter_turns: 1,
            ..Transform::IDENTITY
        };
        assert_eq!(t.apply(&g, 1, 2, 3), vec!['c', 'f', 'b', 'e', 'a', 'd']);
        let f = Transform {
            flip_h: true,
            ..Transform::IDENTITY
        };
        assert_eq!(f.apply(&g, 1, 2, 3), vec!['c', 'b', 'a', 'f', 'e', 'd']);
    }

    #[test]
    fn four_turns_are_identity() {
        let g: Vec<u32> = (0..20).collect();
        let t = Transform {
            quarter_turns: 1,
            ..Transform::IDENTITY
        };
        let mut cur = g.clone();
        let (mut h, mut w) = (4, 5);
        for _ in 0..4 {
            cur = t.apply(&cur, 1, h, w);
            std::mem::swap(&mut h, &mut w);
        }
        assert_eq!(cur, g);
        assert_eq!(Transform::IDENTITY.apply(&g, 1, 4, 5), g);
    }
}
