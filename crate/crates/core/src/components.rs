//! 8-connected component labeling (two-pass union-find).

/// Component id per pixel (`0` = not in the mask, ids start at 1) and the
/// area of every component (`areas[id - 1]`). Ids follow raster order of
/// each component's first pixel.
pub fn label_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(mask.len(), height * width);
    let mut parent: Vec<u32> = vec![0];
    let mut labels = vec![0u32; mask.len()];

    fn find(parent: &mut [u32], mut a: u32) -> u32 {
        while parent[a as usize] != a {
            parent[a as usize] = parent[parent[a as usize] as usize];
            a = parent[a as usize];
        }
        a
    }
    fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
        let (ra, rb) = (find(parent, a), find(parent, b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi as usize] = lo;
        lo
    }

    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            // Already-visited neighbors: W, NW, N, NE.
            let mut current = 0u32;
            let visit = |j: usize, current: &mut u32, parent: &mut Vec<u32>| {
                let l = labels[j];
                if l != 0 {
                    *current = if *current == 0 { find(parent, l) } else { union(parent, *current, l) };
                }
            };
            if x > 0 {
                visit(i - 1, &mut current, &mut parent);
            }
            if y > 0 {
                let up = i - width;
                if x > 0 {
                    visit(up - 1, &mut current, &mut parent);
                }
                visit(up, &mut current, &mut parent);
                if x + 1 < width {
                    visit(up + 1, &mut current, &mut parent);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            labels[i] = current;
        }
    }

    // Resolve roots and renumber densely in raster order.
    let mut dense = vec![0u32; parent.len()];
    let mut areas = Vec::new();
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if dense[root] == 0 {
            areas.push(0);
            dense[root] = areas.len() as u32;
        }
        *l = dense[root];
        areas[*l as usize - 1] += 1;
    }
    (labels, areas)
}
