use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn plane_dims(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!(
            "expected a single H×W map, got {:?}",
            map.shape()
        ))),
    }
}

/// Gradient magnitude `sqrt(Gx² + Gy²)` of the 3×3 Sobel operator with
/// replicated borders.
pub fn sobel_gradients(map: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims(map)?;
    if h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "Sobel needs at least 3×3, got {h}×{w}"
        )));
    }
    let src = map.data();
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        f64::from(src[y * w + x])
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt() as f32);
        }
    }
    Tensor::from_vec(map.shape(), out)
}

/// `sobel(after) − sobel(before)`: positive where structure appeared,
/// negative where it was blurred away.
pub fn gradient_impact_map(before: &Tensor, after: &Tensor) -> Result<Tensor> {
    if before.shape() != after.shape() {
        return Err(Error::shape(format!(
            "before {:?} does not match after {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let gb = sobel_gradients(before)?;
    let ga = sobel_gradients(after)?;
    let diff = ga.data().iter().zip(gb.data()).map(|(a, b)| a - b).collect();
    Tensor::from_vec(before.shape(), diff)
}
