//! Directional pixel co-occurrence histograms and the stacked CNN input tensor.
//!
//! For a direction with offset `(dr, dc)` the histogram counts, per channel, every pair of
//! in-bounds pixels `(I[m, n], I[m + dr, n + dc])`. Each 256x256 count matrix is divided by
//! its maximum and the slices are stacked channel-major, direction-minor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::PixelImage;

/// Number of gray levels of an 8-bit sample; the histogram side length.
pub const LEVELS: usize = 256;
const BINS: usize = LEVELS * LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairDirection {
    /// Right neighbour.
    Horizontal,
    /// Bottom neighbour.
    Vertical,
    /// Bottom-right neighbour.
    Diagonal,
    /// Bottom-left neighbour.
    AntiDiagonal,
}

impl PairDirection {
    pub const ALL: [PairDirection; 4] = [
        PairDirection::Horizontal,
        PairDirection::Vertical,
        PairDirection::Diagonal,
        PairDirection::AntiDiagonal,
    ];

    /// Row and column offset of the second pixel of a pair.
    pub fn offset(self) -> (isize, isize) {
        match self {
            PairDirection::Horizontal => (0, 1),
            PairDirection::Vertical => (1, 0),
            PairDirection::Diagonal => (1, 1),
            PairDirection::AntiDiagonal => (1, -1),
        }
    }

    fn letter(self) -> char {
        match self {
            PairDirection::Horizontal => 'h',
            PairDirection::Vertical => 'v',
            PairDirection::Diagonal => 'd',
            PairDirection::AntiDiagonal => 'a',
        }
    }
}

/// Nonempty set of pair directions, always held in H, V, D, A order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PairSubset(Vec<PairDirection>);

impl PairSubset {
    pub fn new(directions: &[PairDirection]) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::InvalidArgument("pair subset must not be empty".into()));
        }
        let mut sorted = directions.to_vec();
        sorted.sort();
        let before = sorted.len();
        sorted.dedup();
        if sorted.len() != before {
            return Err(Error::InvalidArgument(format!(
                "pair subset has duplicate directions: {directions:?}"
            )));
        }
        Ok(Self(sorted))
    }

    pub fn h() -> Self {
        Self(vec![PairDirection::Horizontal])
    }

    pub fn v() -> Self {
        Self(vec![PairDirection::Vertical])
    }

    pub fn hv() -> Self {
        Self(vec![PairDirection::Horizontal, PairDirection::Vertical])
    }

    pub fn hvda() -> Self {
        Self(PairDirection::ALL.to_vec())
    }

    pub fn directions(&self) -> &[PairDirection] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tag(&self) -> String {
        self.0.iter().map(|d| d.letter()).collect()
    }

    /// Tensor depth produced for an image with `channels` channels.
    pub fn depth(&self, channels: usize) -> usize {
        channels * self.len()
    }
}

impl Default for PairSubset {
    fn default() -> Self {
        Self::hvda()
    }
}

impl fmt::Display for PairSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for PairSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dirs = s
            .to_ascii_lowercase()
            .chars()
            .map(|c| match c {
                'h' => Ok(PairDirection::Horizontal),
                'v' => Ok(PairDirection::Vertical),
                'd' => Ok(PairDirection::Diagonal),
                'a' => Ok(PairDirection::AntiDiagonal),
                other => Err(Error::InvalidArgument(format!(
                    "unknown pair direction `{other}` in `{s}` (expected letters from h, v, d, a)"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        PairSubset::new(&dirs)
    }
}

impl TryFrom<String> for PairSubset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PairSubset> for String {
    fn from(s: PairSubset) -> String {
        s.tag()
    }
}

/// Raw 256x256 pair counts; row = first pixel value, column = second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    counts: Vec<u64>,
}

impl CountMatrix {
    pub fn zeros() -> Self {
        Self {
            counts: vec![0; BINS],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() != BINS {
            return Err(Error::Shape(format!(
                "count matrix needs {BINS} entries, got {}",
                counts.len()
            )));
        }
        Ok(Self { counts })
    }

    #[inline]
    pub fn get(&self, first: usize, second: usize) -> u64 {
        self.counts[first * LEVELS + second]
    }

    pub fn set(&mut self, first: usize, second: usize, value: u64) {
        self.counts[first * LEVELS + second] = value;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn transpose(&self) -> CountMatrix {
        let mut out = CountMatrix::zeros();
        for i in 0..LEVELS {
            for j in 0..LEVELS {
                out.counts[j * LEVELS + i] = self.counts[i * LEVELS + j];
            }
        }
        out
    }
}

/// Counts pixel pairs of a single row-major channel plane along `dir`.
pub fn pair_histogram(
    plane: &[u8],
    width: usize,
    height: usize,
    dir: PairDirection,
) -> CountMatrix {
    assert_eq!(plane.len(), width * height, "plane size does not match dimensions");
    let mut hist = CountMatrix::zeros();
    let (dr, dc) = dir.offset();
    let dr = dr as usize;
    if height <= dr || width <= dc.unsigned_abs() {
        return hist;
    }
    // Column range of the first pixel so that the partner stays in bounds.
    let (col_start, col_end) = if dc >= 0 {
        (0, width - dc as usize)
    } else {
        (dc.unsigned_abs(), width)
    };
    let counts = &mut hist.counts;
    for m in 0..height - dr {
        let first_row = &plane[m * width..(m + 1) * width];
        let second_row = &plane[(m + dr) * width..(m + dr + 1) * width];
        let partner = |n: usize| (n as isize + dc) as usize;
        let firsts = &first_row[col_start..col_end];
        let seconds = &second_row[partner(col_start)..partner(col_start) + firsts.len()];
        for (&a, &b) in firsts.iter().zip(seconds) {
            counts[((a as usize) << 8) | b as usize] += 1;
        }
    }
    hist
}

/// Max-normalized histogram; an all-zero input stays all zero.
pub fn normalize(counts: &CountMatrix) -> Vec<f32> {
    let max = counts.counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; BINS];
    }
    let max = max as f64;
    counts
        .counts
        .iter()
        .map(|&c| (c as f64 / max) as f32)
        .collect()
}

/// Stacked normalized co-occurrence slices for one image, shape 256x256xD.
///
/// Values are stored height-width-depth interleaved, matching the NHWC layout used by the
/// network. Slice `c * |subset| + d` holds channel `c` under direction `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocTensor {
    values: Vec<f32>,
    depth: usize,
    source_dims: (usize, usize),
    subset: PairSubset,
}

impl CoocTensor {
    pub fn from_values(
        values: Vec<f32>,
        depth: usize,
        source_dims: (usize, usize),
        subset: PairSubset,
    ) -> Result<Self> {
        if depth == 0 || values.len() != BINS * depth {
            return Err(Error::Shape(format!(
                "co-occurrence tensor of depth {depth} needs {} values, got {}",
                BINS * depth,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "co-occurrence values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            values,
            depth,
            source_dims,
            subset,
        })
    }

    pub fn zeros(depth: usize, subset: PairSubset) -> Self {
        Self {
            values: vec![0.0; BINS * depth],
            depth,
            source_dims: (0, 0),
            subset,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [LEVELS, LEVELS, self.depth]
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn subset(&self) -> &PairSubset {
        &self.subset
    }

    #[inline]
    pub fn get(&self, first: usize, second: usize, slice: usize) -> f32 {
        self.values[(first * LEVELS + second) * self.depth + slice]
    }

    /// Copies one 256x256 slice out, row-major.
    pub fn slice(&self, slice: usize) -> Vec<f32> {
        assert!(slice < self.depth);
        self.values
            .iter()
            .skip(slice)
            .step_by(self.depth)
            .copied()
            .collect()
    }

    /// Nonzero entries as `(flat index into values, value)`.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
    }
}

pub fn feature_tensor(img: &PixelImage, subset: &PairSubset) -> CoocTensor {
    let per_channel = subset.len();
    let depth = subset.depth(img.channels());
    let mut values = vec![0.0f32; BINS * depth];
    for c in 0..img.channels() {
        let plane = img.channel_plane(c);
        for (d, &dir) in subset.directions().iter().enumerate() {
            let slice = c * per_channel + d;
            let normalized = normalize(&pair_histogram(&plane, img.width(), img.height(), dir));
            for (bin, v) in normalized.into_iter().enumerate() {
                values[bin * depth + slice] = v;
            }
        }
    }
    CoocTensor {
        values,
        depth,
        source_dims: (img.width(), img.height()),
        subset: subset.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal reading of the pair definition: visit every pixel, test the partner bounds.
    fn brute_force(plane: &[u8], w: usize, h: usize, dr: isize, dc: isize) -> Vec<u64> {
        let mut c = vec![0u64; BINS];
        for m in 0..h as isize {
            for n in 0..w as isize {
                let (m2, n2) = (m + dr, n + dc);
                if m2 < 0 || n2 < 0 || m2 >= h as isize || n2 >= w as isize {
                    continue;
                }
                let i = plane[(m * w as isize + n) as usize] as usize;
                let j = plane[(m2 * w as isize + n2) as usize] as usize;
                c[i * 256 + j] += 1;
            }
        }
        c
    }

    fn random_plane(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        (0..w * h).map(|_| rng.gen()).collect()
    }

    #[test]
    fn constant_two_by_two_horizontal() {
        let hist = pair_histogram(&[7, 7, 7, 7], 2, 2, PairDirection::Horizontal);
        assert_eq!(hist.get(7, 7), 2);
        assert_eq!(hist.total(), 2);
    }

    #[test]
    fn row_vector_has_no_vertical_pairs() {
        let hist = pair_histogram(&[1, 2, 3, 4, 5], 5, 1, PairDirection::Vertical);
        assert_eq!(hist.total(), 0);
    }

    #[test]
    fn random_nine_by_nine_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plane = random_plane(9, 9, &mut rng);
        for dir in PairDirection::ALL {
            let (dr, dc) = dir.offset();
            let hist = pair_histogram(&plane, 9, 9, dir);
            assert_eq!(hist.counts(), &brute_force(&plane, 9, 9, dr, dc)[..], "{dir:?}");
        }
    }

    #[test]
    fn anti_diagonal_skips_left_border() {
        // 2x2: only the pair (0,1) -> (1,0) is valid.
        let hist = pair_histogram(&[1, 2, 3, 4], 2, 2, PairDirection::AntiDiagonal);
        assert_eq!(hist.total(), 1);
        assert_eq!(hist.get(2, 3), 1);
    }

    #[test]
    fn left_pairs_are_transpose_of_right_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane = random_plane(17, 11, &mut rng);
        let right = pair_histogram(&plane, 17, 11, PairDirection::Horizontal);
        let left = brute_force(&plane, 17, 11, 0, -1);
        assert_eq!(right.transpose().counts(), &left[..]);
    }

    #[test]
    fn normalize_cases() {
        let mut m = CountMatrix::zeros();
        m.set(3, 5, 17);
        let n = normalize(&m);
        assert_eq!(n[3 * 256 + 5], 1.0);
        assert_eq!(n.iter().filter(|&&v| v != 0.0).count(), 1);

        assert!(normalize(&CountMatrix::zeros()).iter().all(|&v| v == 0.0));

        let mut m = CountMatrix::zeros();
        m.set(0, 0, 4);
        m.set(1, 1, 2);
        let n = normalize(&m);
        assert_eq!((n[0], n[257]), (1.0, 0.5));
    }

    #[test]
    fn rgb_hvda_has_depth_twelve() {
        let img = PixelImage::filled(8, 8, 3, 10).unwrap();
        let t = feature_tensor(&img, &PairSubset::hvda());
        assert_eq!(t.shape(), [256, 256, 12]);
    }

    #[test]
    fn gray_horizontal_has_depth_one() {
        let img = PixelImage::filled(8, 8, 1, 10).unwrap();
        assert_eq!(feature_tensor(&img, &PairSubset::h()).shape(), [256, 256, 1]);
    }

    #[test]
    fn slice_layout_is_channel_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..20 * 15 * 3).map(|_| rng.gen()).collect();
        let img = PixelImage::new(20, 15, 3, data).unwrap();
        let t = feature_tensor(&img, &PairSubset::hvda());
        // channel 1, Vertical (index 1 within the subset)
        let expected = normalize(&pair_histogram(
            &img.channel_plane(1),
            20,
            15,
            PairDirection::Vertical,
        ));
        assert_eq!(t.slice(4 + 1), expected);
    }

    #[test]
    fn subset_parsing_orders_and_rejects() {
        assert_eq!("vh".parse::<PairSubset>().unwrap(), PairSubset::hv());
        assert_eq!("HVDA".parse::<PairSubset>().unwrap().tag(), "hvda");
        assert!("hh".parse::<PairSubset>().is_err());
        assert!("".parse::<PairSubset>().is_err());
        assert!("x".parse::<PairSubset>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matches_brute_force(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plane = random_plane(w, h, &mut rng);
            for dir in PairDirection::ALL {
                let (dr, dc) = dir.offset();
                let hist = pair_histogram(&plane, w, h, dir);
                prop_assert_eq!(hist.counts(), &brute_force(&plane, w, h, dr, dc)[..]);
                let expected = (h.saturating_sub(dr as usize) * w.saturating_sub(dc.unsigned_abs())) as u64;
                prop_assert_eq!(hist.total(), expected);
            }
        }

        #[test]
        fn constant_shift_moves_along_diagonal(w in 2usize..20, h in 2usize..20, k in 1u8..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plane: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..=255 - k)).collect();
            let shifted: Vec<u8> = plane.iter().map(|&v| v + k).collect();
            for dir in PairDirection::ALL {
                let a = pair_histogram(&plane, w, h, dir);
                let b = pair_histogram(&shifted, w, h, dir);
                for i in 0..256 - k as usize {
                    for j in 0..256 - k as usize {
                        prop_assert_eq!(b.get(i + k as usize, j + k as usize), a.get(i, j));
                    }
                }
                prop_assert_eq!(a.total(), b.total());
            }
        }

        #[test]
        fn normalized_slices_hit_one(w in 2usize..16, h in 2usize..16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..w * h * 3).map(|_| rng.gen()).collect();
            let img = PixelImage::new(w, h, 3, data).unwrap();
            let t = feature_tensor(&img, &PairSubset::hvda());
            prop_assert_eq!(t.shape(), [256, 256, 12]);
            for s in 0..12 {
                let slice = t.slice(s);
                let max = slice.iter().cloned().fold(0.0f32, f32::max);
                prop_assert!(max == 0.0 || max == 1.0);
                prop_assert!(slice.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
