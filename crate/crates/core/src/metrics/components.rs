use crate::raster::Mask;

/// Connected-component labelling of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    /// 0 for background, `1..=count` for objects.
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Components {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label, index 0 = background.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count + 1];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// Pixels of a component that have a 4-neighbour outside it. Neighbours
    /// beyond the image edge do not count.
    pub fn border_pixels(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.count + 1];
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.label(x, y);
                if l == 0 {
                    continue;
                }
                let differs = |nx: isize, ny: isize| {
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < self.width
                        && (ny as usize) < self.height
                        && self.label(nx as usize, ny as usize) != l
                };
                let (xi, yi) = (x as isize, y as isize);
                if differs(xi - 1, yi) || differs(xi + 1, yi) || differs(xi, yi - 1) || differs(xi, yi + 1) {
                    out[l as usize].push((x, y));
                }
            }
        }
        out
    }
}

/// 4-connected labelling; labels are assigned in raster-scan order of each
/// component's first pixel.
pub fn connected_components(mask: &Mask) -> Components {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] != 0 && labels[j] == 0 {
                    labels[j] = count;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    Components {
        width: w,
        height: h,
        labels,
        count: count as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_has_no_components() {
        assert_eq!(connected_components(&Mask::zeros(8, 8)).count, 0);
    }

    #[test]
    fn diagonal_pixels_are_separate() {
        let mut m = Mask::zeros(4, 4);
        m.set(1, 1, true);
        m.set(2, 2, true);
        let c = connected_components(&m);
        assert_eq!(c.count, 2);
        assert_eq!(c.label(1, 1), 1);
        assert_eq!(c.label(2, 2), 2);
    }

    #[test]
    fn squares_have_painted_areas() {
        let mut m = Mask::zeros(32, 32);
        let boxes = [(1, 1, 4, 5), (10, 3, 6, 6), (20, 20, 3, 9)];
        for &(x0, y0, bw, bh) in &boxes {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    m.set(x, y, true);
                }
            }
        }
        let c = connected_components(&m);
        assert_eq!(c.count, 3);
        let areas = c.areas();
        assert_eq!(&areas[1..], &[20, 36, 27]);
    }
}
