//! Binary masks and the morphology used to shape them.

use std::collections::VecDeque;

/// How erosion treats pixels beyond the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Out-of-frame neighbors are skipped.
    Ignore,
    /// Out-of-frame neighbors count as background.
    Background,
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask shapes");
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn minus(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn xor(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a != b)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn erode(&self, radius: usize, boundary: Boundary) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let offsets = disk(radius);
        let (w, h) = (self.width as isize, self.height as isize);
        Mask::from_fn(self.width, self.height, |x, y| {
            offsets.iter().all(|&(dx, dy)| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    boundary == Boundary::Ignore
                } else {
                    self.get(sx as usize, sy as usize)
                }
            })
        })
    }

    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let offsets = disk(radius);
        let (w, h) = (self.width as isize, self.height as isize);
        Mask::from_fn(self.width, self.height, |x, y| {
            offsets.iter().any(|&(dx, dy)| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                sx >= 0 && sy >= 0 && sx < w && sy < h && self.get(sx as usize, sy as usize)
            })
        })
    }

    pub fn open(&self, radius: usize) -> Mask {
        self.erode(radius, Boundary::Ignore).dilate(radius)
    }

    pub fn close(&self, radius: usize) -> Mask {
        self.dilate(radius).erode(radius, Boundary::Ignore)
    }

    /// 8-connected component labels (0 = background) and the component count.
    pub fn components(&self) -> (Vec<u32>, usize) {
        let mut labels = vec![0u32; self.data.len()];
        let mut next = 0u32;
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if !self.data[start] || labels[start] != 0 {
                continue;
            }
            next += 1;
            labels[start] = next;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                            continue;
                        }
                        let j = ny as usize * self.width + nx as usize;
                        if self.data[j] && labels[j] == 0 {
                            labels[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        (labels, next as usize)
    }

    /// Largest 8-connected component; ties go to the earliest in row-major order.
    pub fn largest_component(&self) -> Mask {
        let (labels, n) = self.components();
        if n == 0 {
            return self.clone();
        }
        let mut sizes = vec![0usize; n + 1];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        let best = (1..=n).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).unwrap() as u32;
        Mask {
            width: self.width,
            height: self.height,
            data: labels.iter().map(|&l| l == best).collect(),
        }
    }

    /// Fills background regions not 4-connected to the frame.
    pub fn fill_holes(&self) -> Mask {
        let mut outside = vec![false; self.data.len()];
        let mut queue = VecDeque::new();
        let (w, h) = (self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let on_edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                if on_edge && !self.data[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !self.data[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
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
        Mask {
            width: w,
            height: h,
            data: outside.iter().map(|&o| !o).collect(),
        }
    }

    /// 0/255 grayscale bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }

    pub fn from_gray(width: usize, height: usize, bytes: &[u8]) -> Mask {
        Mask::from_vec(width, height, bytes.iter().map(|&b| b > 127).collect())
    }

    /// Nearest-neighbor resampling.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| {
            let sx = (x * self.width) / width;
            let sy = (y * self.height) / height;
            self.get(sx, sy)
        })
    }
}
