//! Jigsaw pretext task: a fixed vocabulary of patch permutations, patch
//! shuffling, and pretext-label generation.
//!
//! The vocabulary always has the identity at index 0, so an untouched
//! image is expressible as pretext class 0. Remaining entries are chosen
//! greedily to maximize the minimum pairwise Hamming distance over a pool
//! of random candidates; the full permutation space of a 4x4 grid is far
//! too large to enumerate.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ImageData;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// The fixed permutation vocabulary shared by training and testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    pub grid: usize,
    pub perms: Vec<Vec<usize>>,
}

/// A shuffled image together with its pretext class.
#[derive(Debug, Clone)]
pub struct PretextExample {
    pub shuffled_image: ImageData,
    pub class_index: usize,
}

impl PermutationSet {
    pub fn m(&self) -> usize {
        self.perms.len()
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Inverse of permutation `index`.
    pub fn inverse(&self, index: usize) -> Result<Vec<usize>> {
        let p = self
            .perms
            .get(index)
            .ok_or(Error::PermIndexOutOfRange {
                index,
                m: self.m(),
            })?;
        let mut inv = vec![0; p.len()];
        for (i, &v) in p.iter().enumerate() {
            inv[v] = i;
        }
        Ok(inv)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_patches();
        let identity: Vec<usize> = (0..n).collect();
        if self.perms.is_empty() || self.perms[0] != identity {
            return Err(Error::Config("perms[0] must be the identity".into()));
        }
        for (i, p) in self.perms.iter().enumerate() {
            let mut seen = vec![false; n];
            if p.len() != n {
                return Err(Error::Config(format!("perm {i} has wrong length")));
            }
            for &v in p {
                if v >= n || seen[v] {
                    return Err(Error::Config(format!("perm {i} is not a bijection")));
                }
                seen[v] = true;
            }
            for q in &self.perms[..i] {
                if q == p {
                    return Err(Error::Config(format!("perm {i} duplicates an earlier one")));
                }
            }
        }
        Ok(())
    }
}

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn permutation_space(grid: usize) -> u128 {
    let n = (grid * grid) as u128;
    let mut f: u128 = 1;
    for i in 2..=n {
        f = f.saturating_mul(i);
    }
    f
}

/// Build the permutation vocabulary.
///
/// Deterministic in `(m, grid, seed)`. Index 0 is the identity; each
/// further entry is the candidate (from a pool of 10,000 random draws)
/// whose minimum Hamming distance to the already-chosen set is largest.
pub fn build_permutation_set(m: usize, grid: usize, seed: u64) -> Result<PermutationSet> {
    if m < 1 {
        return Err(Error::Config("permutation vocabulary needs m >= 1".into()));
    }
    if grid < 1 {
        return Err(Error::Config("grid must be >= 1".into()));
    }
    let space = permutation_space(grid);
    if (m as u128) > space {
        return Err(Error::PermutationSpaceExceeded { m, grid, space });
    }

    let n = grid * grid;
    let identity: Vec<usize> = (0..n).collect();
    let mut perms = vec![identity.clone()];
    let mut rng = seed::rng_from(seed::mix(seed, &[stream::PERM_SET, m as u64, grid as u64]));

    const POOL: usize = 10_000;
    while perms.len() < m {
        let mut best: Option<(usize, Vec<usize>)> = None;
        for _ in 0..POOL {
            let mut cand = identity.clone();
            cand.shuffle(&mut rng);
            if perms.iter().any(|p| p == &cand) {
                continue;
            }
            let min_d = perms.iter().map(|p| hamming(p, &cand)).min().unwrap();
            if best.as_ref().map_or(true, |(d, _)| min_d > *d) {
                best = Some((min_d, cand));
            }
        }
        match best {
            Some((_, cand)) => perms.push(cand),
            // Tiny spaces (e.g. grid 2) can exhaust the random pool; fall
            // back to scanning in lexicographic order for an unused perm.
            None => {
                let cand = next_unused(&perms, n).ok_or(Error::PermutationSpaceExceeded {
                    m,
                    grid,
                    space,
                })?;
                perms.push(cand);
            }
        }
    }
    let set = PermutationSet { grid, perms };
    set.validate()?;
    Ok(set)
}

fn next_unused(perms: &[Vec<usize>], n: usize) -> Option<Vec<usize>> {
    let mut cand: Vec<usize> = (0..n).collect();
    loop {
        if !perms.iter().any(|p| p == &cand) {
            return Some(cand);
        }
        if !next_permutation(&mut cand) {
            return None;
        }
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Recompose an image from its grid patches under permutation `perm_index`:
/// output patch `p` is input patch `perms[perm_index][p]`.
pub fn shuffle_image(
    image: &ImageData,
    perm_index: usize,
    pset: &PermutationSet,
) -> Result<PretextExample> {
    let g = pset.grid;
    if image.h % g != 0 || image.w % g != 0 {
        return Err(Error::GridMismatch {
            h: image.h,
            w: image.w,
            grid: g,
        });
    }
    let perm = pset
        .perms
        .get(perm_index)
        .ok_or(Error::PermIndexOutOfRange {
            index: perm_index,
            m: pset.m(),
        })?;

    let ph = image.h / g;
    let pw = image.w / g;
    let mut out = ImageData::zeros(image.h, image.w, image.c);
    for dst_patch in 0..g * g {
        let src_patch = perm[dst_patch];
        let (dr, dc) = (dst_patch / g, dst_patch % g);
        let (sr, sc) = (src_patch / g, src_patch % g);
        for y in 0..ph {
            let dy = dr * ph + y;
            let sy = sr * ph + y;
            let dst_off = (dy * image.w + dc * pw) * image.c;
            let src_off = (sy * image.w + sc * pw) * image.c;
            let n = pw * image.c;
            out.pixels[dst_off..dst_off + n]
                .copy_from_slice(&image.pixels[src_off..src_off + n]);
        }
    }
    Ok(PretextExample {
        shuffled_image: out,
        class_index: perm_index,
    })
}

/// One pretext example per input image, with the permutation index drawn
/// uniformly from the vocabulary. Deterministic in the seed.
pub fn make_pretext_batch(
    images: &[ImageData],
    pset: &PermutationSet,
    seed: u64,
) -> Result<Vec<PretextExample>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("pretext batch needs >= 1 image".into()));
    }
    let mut rng = seed::rng_from(seed::mix(seed, &[stream::PRETEXT]));
    images
        .iter()
        .map(|img| {
            let k = rng.gen_range(0..pset.m());
            shuffle_image(img, k, pset)
        })
        .collect()
}

/// Flat image index map implementing the same patch move as
/// [`shuffle_image`], for building shuffles inside tensor graphs.
pub fn shuffle_index_map(h: usize, w: usize, c: usize, perm: &[usize], grid: usize) -> Rc<Vec<i64>> {
    let ph = h / grid;
    let pw = w / grid;
    let mut idx = vec![0i64; h * w * c];
    for dst_patch in 0..grid * grid {
        let src_patch = perm[dst_patch];
        let (dr, dc) = (dst_patch / grid, dst_patch % grid);
        let (sr, sc) = (src_patch / grid, src_patch % grid);
        for y in 0..ph {
            for x in 0..pw {
                let dy = dr * ph + y;
                let dx = dc * pw + x;
                let sy = sr * ph + y;
                let sx = sc * pw + x;
                for ch in 0..c {
                    idx[(dy * w + dx) * c + ch] = ((sy * w + sx) * c + ch) as i64;
                }
            }
        }
    }
    Rc::new(idx)
}
