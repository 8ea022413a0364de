use super::ModelError;
use crate::canvas::Image;
use ndarray::Array2;

/// Square-patch tiling of an `H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self, ModelError> {
        if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
            return Err(ModelError::Config(format!(
                "patch_size {patch} must divide image size {height}x{width}"
            )));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Pixel rectangle `(y0, y1, x0, x1)` of token `index`, ends exclusive.
    pub fn token_rect(&self, index: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (index / self.cols(), index % self.cols());
        let p = self.patch;
        (r * p, (r + 1) * p, c * p, (c + 1) * p)
    }

    pub fn token_of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.patch) * self.cols() + x / self.patch
    }

    fn check(&self, dims: (usize, usize)) -> Result<(), ModelError> {
        if dims != (self.height, self.width) {
            return Err(ModelError::Shape(format!(
                "image is {}x{}, grid expects {}x{}",
                dims.0, dims.1, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Row-major patches; each row holds one patch as `(py, px, channel)`.
pub fn patchify(image: &Image, grid: &PatchGrid) -> Result<Array2<f64>, ModelError> {
    grid.check(image.dims())?;
    let p = grid.patch;
    let mut out = Array2::zeros((grid.num_tokens(), grid.token_dim()));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let (y0, _, x0, _) = grid.token_rect(t);
        let mut k = 0;
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                for v in image.pixel(y, x) {
                    row[k] = v;
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: &Array2<f64>, grid: &PatchGrid) -> Result<Image, ModelError> {
    if tokens.dim() != (grid.num_tokens(), grid.token_dim()) {
        return Err(ModelError::Shape(format!(
            "token matrix is {:?}, grid expects ({}, {})",
            tokens.dim(),
            grid.num_tokens(),
            grid.token_dim()
        )));
    }
    let p = grid.patch;
    let mut image = Image::new(grid.height, grid.width);
    for (t, row) in tokens.rows().into_iter().enumerate() {
        let (y0, _, x0, _) = grid.token_rect(t);
        for dy in 0..p {
            for dx in 0..p {
                let k = (dy * p + dx) * 3;
                image.set_pixel(y0 + dy, x0 + dx, [row[k], row[k + 1], row[k + 2]]);
            }
        }
    }
    Ok(image)
}
