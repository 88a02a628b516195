//! Row-major 2D rasters for images and per-pixel maps.

/// Dense height×width grid of `T`, row-major, pixel (0, 0) at the top left.
///
/// All rendering math runs in `f64`; see [`ScalarMap`] and [`ColorMap`].
/// 32-bit storage only appears at file boundaries (grid files, PFM).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Per-pixel scalar quantity (density, distance, depth, weight).
pub type ScalarMap = Raster<f64>;
/// Per-pixel RGB triplet.
pub type ColorMap = Raster<[f64; 3]>;

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "empty raster {width}x{height}");
        Raster { width, height, data: vec![value; width * height] }
    }

    /// Wraps existing row-major data; `data.len()` must equal `width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "raster data length mismatch");
        assert!(width > 0 && height > 0, "empty raster {width}x{height}");
        Raster { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        debug_assert!(x < self.width && y < self.height);
        &mut self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Row-major pixel coordinate iterator: (0,0), (1,0), … (W-1,H-1).
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + use<T> {
        let w = self.width;
        let h = self.height;
        (0..h).flat_map(move |y| (0..w).map(move |x| (x, y)))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl ScalarMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }
}

impl ColorMap {
    pub fn black(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let mut r = ScalarMap::zeros(3, 2);
        r.set(2, 1, 7.0);
        assert_eq!(r.data()[5], 7.0);
        assert_eq!(r.at(2, 1), 7.0);
    }

    #[test]
    fn coords_cover_all_pixels_in_order() {
        let r = ScalarMap::zeros(2, 2);
        let cs: Vec<_> = r.coords().collect();
        assert_eq!(cs, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    #[should_panic(expected = "length mismatch")]
    fn from_vec_rejects_bad_length() {
        let _ = ScalarMap::from_vec(2, 2, vec![0.0; 3]);
    }
}
