//! Invertible patch tokenization of frames.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Patch tokens of `frames` frames, each cut into a `grid.0 × grid.1` grid of
/// `patch × patch` squares. Row `f·n + r·grid.1 + c` holds the patch at grid
/// cell (r, c) of frame f, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    pub tokens: Matrix,
    pub frames: usize,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl FrameTokens {
    pub fn per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

pub fn patchify(frames: &[Matrix], patch: usize) -> Result<FrameTokens> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("patchify needs at least one frame".into()))?;
    let (h, w) = first.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} frame is not divisible into {patch}x{patch} patches")));
    }
    let grid = (h / patch, w / patch);
    let per = grid.0 * grid.1;
    let mut tokens = Matrix::zeros(frames.len() * per, patch * patch);
    for (f, frame) in frames.iter().enumerate() {
        if frame.shape() != (h, w) {
            return Err(Error::Shape("frames differ in size".into()));
        }
        for gr in 0..grid.0 {
            for gc in 0..grid.1 {
                let row = tokens.row_mut(f * per + gr * grid.1 + gc);
                for pr in 0..patch {
                    let src = &frame.row(gr * patch + pr)[gc * patch..(gc + 1) * patch];
                    row[pr * patch..(pr + 1) * patch].copy_from_slice(src);
                }
            }
        }
    }
    Ok(FrameTokens {
        tokens,
        frames: frames.len(),
        patch,
        grid,
    })
}

pub fn unpatchify(t: &FrameTokens) -> Result<Vec<Matrix>> {
    let p = t.patch;
    let per = t.per_frame();
    if t.tokens.shape() != (t.frames * per, p * p) {
        return Err(Error::Shape(format!(
            "token matrix {:?} does not match {} frames of {per} patches",
            t.tokens.shape(),
            t.frames
        )));
    }
    let (h, w) = (t.grid.0 * p, t.grid.1 * p);
    let mut out = Vec::with_capacity(t.frames);
    for f in 0..t.frames {
        let mut frame = Matrix::zeros(h, w);
        for gr in 0..t.grid.0 {
            for gc in 0..t.grid.1 {
                let row = t.tokens.row(f * per + gr * t.grid.1 + gc);
                for pr in 0..p {
                    frame.row_mut(gr * p + pr)[gc * p..(gc + 1) * p]
                        .copy_from_slice(&row[pr * p..(pr + 1) * p]);
                }
            }
        }
        out.push(frame);
    }
    Ok(out)
}
