//! Dense 3D grid storage shared by volumes, masks, and probability maps.
//!
//! Layout is row-major `[z][y][x]` with `x` fastest, matching the on-disk
//! order used by the NIfTI writer in [`crate::volumes`]. Shapes are written
//! `[d, h, w]` throughout the crate.

/// Flat index for voxel `(z, y, x)` in a `[d, h, w]` grid.
#[inline(always)]
pub fn idx3(shape: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// Total voxel count of a `[d, h, w]` shape.
#[inline(always)]
pub fn numel(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// A dense 3D grid of `T` with `[d, h, w]` shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid3<T> {
    pub shape: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Grid3 {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, T::default())
    }
}

impl<T> Grid3<T> {
    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), numel(shape), "grid data length mismatch");
        Grid3 { shape, data }
    }

    #[inline(always)]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        idx3(self.shape, z, y, x)
    }

    #[inline(always)]
    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[idx3(self.shape, z, y, x)]
    }

    #[inline(always)]
    pub fn get_mut(&mut self, z: usize, y: usize, x: usize) -> &mut T {
        let i = idx3(self.shape, z, y, x);
        &mut self.data[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Iterate voxel coordinates in storage order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let [d, h, w] = self.shape;
        (0..d).flat_map(move |z| (0..h).flat_map(move |y| (0..w).map(move |x| (z, y, x))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_x_fastest() {
        let g: Grid3<u8> = Grid3::zeros([2, 3, 4]);
        assert_eq!(g.idx(0, 0, 0), 0);
        assert_eq!(g.idx(0, 0, 1), 1);
        assert_eq!(g.idx(0, 1, 0), 4);
        assert_eq!(g.idx(1, 0, 0), 12);
        assert_eq!(g.len(), 24);
    }

    #[test]
    fn coords_cover_grid_in_order() {
        let g: Grid3<u8> = Grid3::zeros([2, 2, 2]);
        let cs: Vec<_> = g.coords().collect();
        assert_eq!(cs.len(), 8);
        assert_eq!(cs[0], (0, 0, 0));
        assert_eq!(cs[1], (0, 0, 1));
        assert_eq!(cs[2], (0, 1, 0));
        assert_eq!(cs[7], (1, 1, 1));
    }
}
