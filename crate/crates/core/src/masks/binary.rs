use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Two-dimensional binary mask, row-major `(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    cells: Array2<bool>,
}

impl BinaryMask {
    pub fn new(cells: Array2<bool>) -> Self {
        Self { cells }
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            cells: Array2::from_elem((rows, cols), value),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            cells: Array2::from_shape_fn((rows, cols), |(y, x)| f(y, x)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cells.dim()
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.cells
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[[y, x]]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[[y, x]] = v;
    }

    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }

    /// Fraction of set cells.
    pub fn coverage(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.area() as f64 / self.cells.len() as f64
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(Self::from_fn(self.dim().0, self.dim().1, |y, x| {
            self.get(y, x) || other.get(y, x)
        }))
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(Self::from_fn(self.dim().0, self.dim().1, |y, x| {
            self.get(y, x) && other.get(y, x)
        }))
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_same(other)?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (a, b) in self.cells.iter().zip(other.cells.iter()) {
            inter += (*a && *b) as usize;
            uni += (*a || *b) as usize;
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    /// Morphological dilation with a Euclidean disk of `radius` cells.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        if radius == 0 {
            return self.clone();
        }
        let (rows, cols) = self.dim();
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let mut out = self.clone();
        for y in 0..rows {
            for x in 0..cols {
                if !self.get(y, x) {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < rows && (nx as usize) < cols {
                        out.cells[[ny as usize, nx as usize]] = true;
                    }
                }
            }
        }
        out
    }

    /// Area-average downsample followed by a `>= 0.5` threshold (ties go to 1).
    pub fn downsample(&self, rows: usize, cols: usize) -> Result<BinaryMask> {
        let (h, w) = self.dim();
        if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
            return Err(Error::invalid(format!(
                "cannot downsample {h}x{w} mask to {rows}x{cols}: resolution must divide evenly"
            )));
        }
        let (fy, fx) = (h / rows, w / cols);
        if fy == 1 && fx == 1 {
            return Ok(self.clone());
        }
        let block = fy * fx;
        Ok(Self::from_fn(rows, cols, |y, x| {
            let mut set = 0usize;
            for yy in y * fy..(y + 1) * fy {
                for xx in x * fx..(x + 1) * fx {
                    set += self.cells[[yy, xx]] as usize;
                }
            }
            // mean >= 0.5  <=>  2*set >= block
            2 * set >= block
        }))
    }

    /// Nearest-neighbour upsample by integer factors.
    pub fn upsample(&self, rows: usize, cols: usize) -> Result<BinaryMask> {
        let (h, w) = self.dim();
        if h == 0 || w == 0 || rows % h != 0 || cols % w != 0 {
            return Err(Error::invalid(format!(
                "cannot upsample {h}x{w} mask to {rows}x{cols}"
            )));
        }
        let (fy, fx) = (rows / h, cols / w);
        Ok(Self::from_fn(rows, cols, |y, x| self.get(y / fy, x / fx)))
    }

    /// Clears 4-connected components smaller than `min_cells`.
    pub fn remove_small_components(&self, min_cells: usize) -> BinaryMask {
        let mut out = self.clone();
        for comp in self.components(true) {
            if comp.len() < min_cells {
                for (y, x) in comp {
                    out.cells[[y, x]] = false;
                }
            }
        }
        out
    }

    /// Fills unset regions that do not touch the border.
    pub fn fill_holes(&self) -> BinaryMask {
        let (h, w) = self.dim();
        let mut out = self.clone();
        for comp in self.components(false) {
            let touches_border = comp
                .iter()
                .any(|&(y, x)| y == 0 || x == 0 || y + 1 == h || x + 1 == w);
            if !touches_border {
                for (y, x) in comp {
                    out.cells[[y, x]] = true;
                }
            }
        }
        out
    }

    /// Keeps only the largest 4-connected set component.
    pub fn largest_component(&self) -> BinaryMask {
        let (h, w) = self.dim();
        let mut out = BinaryMask::filled(h, w, false);
        if let Some(best) = self.components(true).into_iter().max_by_key(|c| c.len()) {
            for (y, x) in best {
                out.cells[[y, x]] = true;
            }
        }
        out
    }

    fn components(&self, value: bool) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = self.dim();
        let mut seen = Array2::from_elem((h, w), false);
        let mut comps = Vec::new();
        let mut queue = VecDeque::new();
        for sy in 0..h {
            for sx in 0..w {
                if seen[[sy, sx]] || self.cells[[sy, sx]] != value {
                    continue;
                }
                let mut comp = Vec::new();
                seen[[sy, sx]] = true;
                queue.push_back((sy, sx));
                while let Some((y, x)) = queue.pop_front() {
                    comp.push((y, x));
                    let neighbours = [
                        (y.wrapping_sub(1), x),
                        (y + 1, x),
                        (y, x.wrapping_sub(1)),
                        (y, x + 1),
                    ];
                    for (ny, nx) in neighbours {
                        if ny < h && nx < w && !seen[[ny, nx]] && self.cells[[ny, nx]] == value {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
                comps.push(comp);
            }
        }
        comps
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::invalid(format!(
                "mask shape mismatch {:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_rows(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn all_ones_stays_all_ones() {
        let m = BinaryMask::filled(16, 16, true);
        for r in [16, 8, 4, 2, 1] {
            assert_eq!(m.downsample(r, r).unwrap().area(), r * r);
        }
    }

    #[test]
    fn three_of_four_rounds_up() {
        let m = mask_from_rows(&["##", "#."]);
        assert!(m.downsample(1, 1).unwrap().get(0, 0));
    }

    #[test]
    fn checkerboard_tie_goes_to_one() {
        let m = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        assert_eq!(m.downsample(2, 2).unwrap().area(), 4);
    }

    #[test]
    fn one_of_four_rounds_down() {
        let m = mask_from_rows(&["#.", ".."]);
        assert!(!m.downsample(1, 1).unwrap().get(0, 0));
    }

    #[test]
    fn non_divisible_resolution_is_rejected() {
        let m = BinaryMask::filled(10, 10, true);
        assert!(matches!(m.downsample(3, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn equal_resolution_is_identity() {
        let m = mask_from_rows(&["#..", ".#.", "..#"]);
        assert_eq!(m.downsample(3, 3).unwrap(), m);
    }

    #[test]
    fn chained_downsample_diverges_for_unaligned_masks() {
        // Threshold-after-average is not associative: the 2x2 intermediate
        // rounds two 3/4 blocks up, the direct path sees 6/16.
        let m = mask_from_rows(&["##..", "#...", "##..", "#..."]);
        let chained = m.downsample(2, 2).unwrap().downsample(1, 1).unwrap();
        let direct = m.downsample(1, 1).unwrap();
        assert_ne!(chained, direct);
    }

    #[test]
    fn dilation_grows_single_cell_to_disk() {
        let mut m = BinaryMask::filled(7, 7, false);
        m.set(3, 3, true);
        let d = m.dilate(2);
        // disk of radius 2: 13 cells
        assert_eq!(d.area(), 13);
        assert!(d.get(1, 3) && d.get(3, 5) && !d.get(1, 1));
    }

    #[test]
    fn small_components_are_removed_and_holes_filled() {
        let m = mask_from_rows(&[
            "#.......", "........", "..####..", "..#..#..", "..####..", "........",
        ]);
        let cleaned = m.remove_small_components(2).fill_holes();
        assert!(!cleaned.get(0, 0));
        assert!(cleaned.get(3, 3) && cleaned.get(3, 4));
        assert_eq!(cleaned.area(), 12);
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..max, 1..max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |v| BinaryMask::new(Array2::from_shape_vec((h, w), v).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn dilation_is_monotone(m in arb_mask(24), r in 0usize..5) {
            let d = m.dilate(r);
            let d_next = m.dilate(r + 1);
            for (a, b) in m.cells().iter().zip(d.cells().iter()) {
                prop_assert!(!*a || *b);
            }
            prop_assert!(d.area() <= d_next.area());
            prop_assert!(m.area() <= d.area());
        }

        // Block-aligned masks (every coarse cell uniform at the intermediate
        // resolution) satisfy downsample(downsample(m, r1), r2) == downsample(m, r2).
        #[test]
        fn chain_consistency_on_aligned_masks(
            coarse in proptest::collection::vec(any::<bool>(), 64),
            f1 in prop::sample::select(vec![1usize, 2, 4]),
        ) {
            let r1 = 8usize;
            let base = BinaryMask::new(Array2::from_shape_vec((r1, r1), coarse).unwrap());
            let fine = base.upsample(r1 * f1 * 2, r1 * f1 * 2).unwrap();
            for r2 in [8usize, 4, 2, 1] {
                let chained = fine.downsample(r1, r1).unwrap().downsample(r2, r2).unwrap();
                let direct = fine.downsample(r2, r2).unwrap();
                prop_assert_eq!(chained, direct);
            }
        }
    }
}
