use super::raster::RasterImage;

/// Ink mask of a line drawing: pixels darker than mid-gray.
pub fn foreground_mask(img: &RasterImage) -> Vec<bool> {
    img.gray().into_iter().map(|v| v < 0.5).collect()
}

/// Labels 8-connected components, returning the label per pixel (0 for
/// background) and the number of components.
fn label_components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &[bool], width: usize, height: usize) -> usize {
    label_components(mask, width, height).1
}

/// Zhang–Suen thinning to one-pixel-wide strokes. Components the thinning
/// would erase entirely (such as 2x2 blocks) keep one pixel.
pub fn skeletonize(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    let original = foreground_mask(img);
    let mut m = original.clone();
    let at = |m: &[bool], x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && x < w as isize && y < h as isize && m[y as usize * w + x as usize]
    };
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            doomed.clear();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !at(&m, x, y) {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&m, x, y - 1),
                        at(&m, x + 1, y - 1),
                        at(&m, x + 1, y),
                        at(&m, x + 1, y + 1),
                        at(&m, x, y + 1),
                        at(&m, x - 1, y + 1),
                        at(&m, x - 1, y),
                        at(&m, x - 1, y - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        doomed.push(y as usize * w + x as usize);
                    }
                }
            }
            for &i in &doomed {
                m[i] = false;
            }
            changed |= !doomed.is_empty();
        }
        if !changed {
            break;
        }
    }
    let (labels, n) = label_components(&original, w, h);
    let mut alive = vec![false; n + 1];
    for (i, &on) in m.iter().enumerate() {
        if on {
            alive[labels[i] as usize] = true;
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && !alive[l as usize] {
            m[i] = true;
            alive[l as usize] = true;
        }
    }
    let data = m.iter().map(|&on| if on { 0.0 } else { 1.0 }).collect();
    RasterImage::new(w, h, 1, data, img.domain).expect("same geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Domain;
    use crate::data::raster::rasterize;
    use crate::data::sketch::StrokeSketch;

    fn from_mask(mask: &[bool], w: usize, h: usize) -> RasterImage {
        let data = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        RasterImage::new(w, h, 1, data, Domain::Sketch).unwrap()
    }

    #[test]
    fn thin_line_unchanged() {
        let (w, h) = (20, 10);
        let mut mask = vec![false; w * h];
        for x in 2..18 {
            mask[5 * w + x] = true;
        }
        let out = skeletonize(&from_mask(&mask, w, h));
        assert_eq!(foreground_mask(&out), mask);
    }

    #[test]
    fn blank_stays_blank() {
        let img = RasterImage::filled(16, 16, 1, 1.0, Domain::Sketch);
        assert_eq!(skeletonize(&img), img);
    }

    #[test]
    fn thick_bar_thins_to_its_centreline() {
        let s = StrokeSketch::new(64.0, 64.0, vec![vec![[12.5, 32.5], [50.5, 32.5]]]).unwrap();
        let img = rasterize(&s, 64, 5).unwrap();
        let out = foreground_mask(&skeletonize(&img));
        let pts: Vec<(usize, usize)> = (0..64 * 64).filter(|&i| out[i]).map(|i| (i % 64, i / 64)).collect();
        let mut cols: Vec<usize> = pts.iter().map(|p| p.0).collect();
        cols.sort();
        cols.dedup();
        // One pixel per column.
        assert_eq!(cols.len(), pts.len());
        assert!(pts.iter().all(|p| p.1.abs_diff(32) <= 1));
        let (lo, hi) = (cols[0], *cols.last().unwrap());
        assert!(lo.abs_diff(12) <= 1 && hi.abs_diff(50) <= 1, "{lo}..{hi}");
    }

    #[test]
    fn component_count_preserved() {
        let (w, h) = (24, 24);
        let mut mask = vec![false; w * h];
        for y in 2..10 {
            for x in 2..12 {
                mask[y * w + x] = true;
            }
        }
        for (x, y) in [(20, 20), (21, 20), (20, 21), (21, 21)] {
            mask[y * w + x] = true;
        }
        mask[15 * w + 3] = true;
        let before = count_components(&mask, w, h);
        let out = foreground_mask(&skeletonize(&from_mask(&mask, w, h)));
        assert_eq!(before, 3);
        assert_eq!(count_components(&out, w, h), before);
    }
}
