use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::partlearn::Grid;

/// Image-to-patch layout: `L = h * w` patches of `3 * p * p` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub channels: usize,
    pub grid: Grid,
}

impl PatchGrid {
    pub fn for_image(channels: usize, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible into {patch_size}x{patch_size} patches"
            )));
        }
        Ok(Self {
            patch_size,
            channels,
            grid: Grid::new(height / patch_size, width / patch_size),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.grid.h * self.patch_size, self.grid.w * self.patch_size]
    }
}

/// `C x H x W` image to `L x (C*p*p)` rows, patches in row-major grid order
/// and each row channel-major.
pub fn patchify(image: &Tensor, pg: &PatchGrid) -> Result<Tensor> {
    if image.shape() != pg.image_shape() {
        return Err(Error::Config(format!(
            "image {:?} does not match patch layout {:?}",
            image.shape(),
            pg.image_shape()
        )));
    }
    let [c, h, w] = pg.image_shape();
    let p = pg.patch_size;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..pg.grid.h {
        for gx in 0..pg.grid.w {
            for ch in 0..c {
                for py in 0..p {
                    let row = (ch * h + gy * p + py) * w + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::from_vec(&[pg.num_patches(), pg.patch_dim()], out)
}

pub fn unpatchify(patches: &Tensor, pg: &PatchGrid) -> Result<Tensor> {
    if patches.shape() != [pg.num_patches(), pg.patch_dim()] {
        return Err(Error::Config(format!(
            "patch matrix {:?} does not match layout {}x{}",
            patches.shape(),
            pg.num_patches(),
            pg.patch_dim()
        )));
    }
    let [c, h, w] = pg.image_shape();
    let p = pg.patch_size;
    let src = patches.data();
    let mut out = vec![0.0; c * h * w];
    let mut k = 0;
    for gy in 0..pg.grid.h {
        for gx in 0..pg.grid.w {
            for ch in 0..c {
                for py in 0..p {
                    let row = (ch * h + gy * p + py) * w + gx * p;
                    out[row..row + p].copy_from_slice(&src[k..k + p]);
                    k += p;
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Mirrors a `C x H x W` image left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    let src = image.data();
    for (r, row) in out.data_mut().chunks_mut(w).enumerate() {
        let s = &src[r * w..(r + 1) * w];
        for x in 0..w {
            row[x] = s[w - 1 - x];
        }
    }
    debug_assert_eq!(out.numel() % (h * w), 0);
    out
}
