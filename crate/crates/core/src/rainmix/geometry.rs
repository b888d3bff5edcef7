//! Affine rain-map transforms: rotation, shear, translation, zoom.

use super::RainMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    ZoomX,
    ZoomY,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Rotate,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::ZoomX,
        OpKind::ZoomY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Rotate => "rot",
            OpKind::ShearX => "shear_x",
            OpKind::ShearY => "shear_y",
            OpKind::TranslateX => "trans_x",
            OpKind::TranslateY => "trans_y",
            OpKind::ZoomX => "zoom_x",
            OpKind::ZoomY => "zoom_y",
        }
    }
}

/// One transform. Magnitude units: degrees for rotation, shear factor,
/// fraction of the image side for translation, scale factor for zoom.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricOp {
    pub kind: OpKind,
    pub magnitude: f64,
}

impl GeometricOp {
    pub fn new(kind: OpKind, magnitude: f64) -> Self {
        Self { kind, magnitude }
    }

    /// Forward map on pixel coordinates centred at the image centre.
    pub fn affine(&self, height: usize, width: usize) -> Affine {
        let m = self.magnitude;
        let a = match self.kind {
            OpKind::Rotate => {
                let (s, c) = m.to_radians().sin_cos();
                [c, -s, 0.0, s, c, 0.0]
            }
            OpKind::ShearX => [1.0, m, 0.0, 0.0, 1.0, 0.0],
            OpKind::ShearY => [1.0, 0.0, 0.0, m, 1.0, 0.0],
            OpKind::TranslateX => [1.0, 0.0, m * width as f64, 0.0, 1.0, 0.0],
            OpKind::TranslateY => [1.0, 0.0, 0.0, 0.0, 1.0, m * height as f64],
            OpKind::ZoomX => [m, 0.0, 0.0, 0.0, 1.0, 0.0],
            OpKind::ZoomY => [1.0, 0.0, 0.0, 0.0, m, 0.0],
        };
        Affine(a)
    }
}

/// `[a, b, tx, c, d, ty]`: `x' = a x + b y + tx`, `y' = c x + d y + ty`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    /// `next ∘ self`: apply `self` first.
    pub fn then(&self, next: &Affine) -> Affine {
        let [a, b, tx, c, d, ty] = self.0;
        let [na, nb, ntx, nc, nd, nty] = next.0;
        Affine([
            na * a + nb * c,
            na * b + nb * d,
            na * tx + nb * ty + ntx,
            nc * a + nd * c,
            nc * b + nd * d,
            nc * tx + nd * ty + nty,
        ])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0] * self.0[4] - self.0[1] * self.0[3]
    }

    pub fn inverse(&self) -> Option<Affine> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let [a, b, tx, c, d, ty] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine([
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, tx, c, d, ty] = self.0;
        (a * x + b * y + tx, c * x + d * y + ty)
    }
}

/// Composite map of a chain `[o1, o2, o3]`, i.e. `o3 ∘ o2 ∘ o1`.
pub fn chain_affine(chain: &[GeometricOp], height: usize, width: usize) -> Affine {
    chain.iter().fold(Affine::IDENTITY, |acc, op| {
        acc.then(&op.affine(height, width))
    })
}

/// Bilinear sample with zero outside the grid.
fn sample_zero(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            data[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1) * fx * (1.0 - fy)
        + at(y0 + 1, x0) * (1.0 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
}

/// Warps `map` by the composed chain about the image centre (bilinear,
/// zero fill, clamped to `[0, 1]`). An identity composite returns the input
/// unchanged. Non-invertible chains yield an all-zero map.
pub fn apply_geometric_op(map: &RainMap, chain: &[GeometricOp]) -> RainMap {
    let (h, w) = (map.height(), map.width());
    let forward = chain_affine(chain, h, w);
    if forward == Affine::IDENTITY {
        return map.clone();
    }
    let Some(inverse) = forward.inverse() else {
        return RainMap::zeros(h, w);
    };
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = map.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse.apply(x as f64 - cx, y as f64 - cy);
            out[y * w + x] = sample_zero(src, h, w, sx + cx, sy + cy).clamp(0.0, 1.0);
        }
    }
    RainMap::from_vec(h, w, out).expect("dimensions preserved")
}
