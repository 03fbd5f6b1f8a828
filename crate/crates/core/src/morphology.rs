//! Binary morphology with disk structuring elements and connected-component filtering.
//!
//! Pixels outside the image are treated as background for dilation and as
//! foreground for erosion, so a full mask is a fixed point of both closing and
//! opening.

use std::collections::VecDeque;

use crate::raster::BinaryMask;

/// Half-widths of the disk of radius `radius`, indexed by `dy + radius`.
pub fn disk_half_widths(radius: u32) -> Vec<u32> {
    let r = radius as i64;
    (-r..=r)
        .map(|dy| {
            let rem = r * r - dy * dy;
            // integer sqrt
            let mut w = (rem as f64).sqrt() as i64;
            while w * w > rem {
                w -= 1;
            }
            while (w + 1) * (w + 1) <= rem {
                w += 1;
            }
            w as u32
        })
        .collect()
}

fn row_prefix_sums(mask: &BinaryMask) -> Vec<u32> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut prefix = vec![0u32; (w + 1) * h];
    for y in 0..h {
        let row = &mask.bits()[y * w..(y + 1) * w];
        let out = &mut prefix[y * (w + 1)..(y + 1) * (w + 1)];
        for x in 0..w {
            out[x + 1] = out[x] + row[x] as u32;
        }
    }
    prefix
}

fn sweep(mask: &BinaryMask, radius: u32, erode: bool) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let prefix = row_prefix_sums(mask);
    let half = disk_half_widths(radius);
    let r = radius as i64;
    let mut out = BinaryMask::empty(mask.width(), mask.height());
    let bits = out.bits_mut();
    for y in 0..h {
        for x in 0..w {
            let mut hit = erode;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                let hw = half[(dy + r) as usize] as i64;
                let lo = (x - hw).max(0) as usize;
                let hi = (x + hw + 1).min(w) as usize;
                let base = yy as usize * (w as usize + 1);
                let count = prefix[base + hi] - prefix[base + lo];
                if erode {
                    if count as usize != hi - lo {
                        hit = false;
                        break;
                    }
                } else if count > 0 {
                    hit = true;
                    break;
                }
            }
            bits[(y * w + x) as usize] = hit;
        }
    }
    out
}

pub fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    sweep(mask, radius, false)
}

pub fn erode(mask: &BinaryMask, radius: u32) -> BinaryMask {
    sweep(mask, radius, true)
}

/// Dilation followed by erosion.
pub fn close(mask: &BinaryMask, radius: u32) -> BinaryMask {
    erode(&dilate(mask, radius), radius)
}

/// Erosion followed by dilation.
pub fn open(mask: &BinaryMask, radius: u32) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// Clears every 8-connected component with fewer than `min_area` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut out = mask.clone();
    if min_area <= 1 {
        return out;
    }
    let mut seen = vec![false; w * h];
    let mut component = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits()[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (px, py) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.bits()[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if component.len() < min_area {
            let bits = out.bits_mut();
            for &p in &component {
                bits[p] = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Brute-force reference: visits every disk offset for every pixel.
    fn naive(mask: &BinaryMask, radius: u32, erode: bool) -> BinaryMask {
        let r = radius as i64;
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
            let mut acc = erode;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let v = mask.get(nx as u32, ny as u32);
                    if erode {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn disk_shape() {
        assert_eq!(disk_half_widths(0), vec![0]);
        assert_eq!(disk_half_widths(1), vec![0, 1, 0]);
        assert_eq!(disk_half_widths(2), vec![0, 1, 2, 1, 0]);
    }

    #[test]
    fn full_mask_is_fixed_point() {
        let m = BinaryMask::full(30, 20);
        assert_eq!(close(&m, 5), m);
        assert_eq!(open(&m, 5), m);
    }

    #[test]
    fn opening_removes_specks() {
        let mut m = BinaryMask::empty(40, 40);
        m.set(10, 10, true);
        m.set(11, 10, true);
        assert_eq!(open(&m, 2).count(), 0);
    }

    #[test]
    fn small_components_dropped() {
        let m = BinaryMask::from_fn(20, 20, |x, y| (x < 3 && y < 3) || (x >= 10 && y >= 10));
        let out = remove_small_components(&m, 10);
        assert_eq!(out.count(), 100);
        assert!(!out.get(0, 0));
        // diagonal neighbours join under 8-connectivity
        let diag = BinaryMask::from_fn(5, 5, |x, y| x == y);
        assert_eq!(remove_small_components(&diag, 5).count(), 5);
    }

    proptest! {
        #[test]
        fn fast_morphology_matches_brute_force(
            w in 1u32..24, h in 1u32..24, r in 0u32..5, seed in any::<u64>()
        ) {
            let mut s = seed | 1;
            let m = BinaryMask::from_fn(w, h, |_, _| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                s % 3 == 0
            });
            prop_assert_eq!(dilate(&m, r), naive(&m, r, false));
            prop_assert_eq!(erode(&m, r), naive(&m, r, true));
        }
    }
}
