//! Boxes, run-length masks, overlap measures and one-to-one matching.
//!
//! Boxes live in normalized image coordinates. Masks use a row-major
//! run-length encoding that always starts with a background run, written
//! as `WxH:r0,r1,...`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("mask dimensions differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: u32,
        a_h: u32,
        b_w: u32,
        b_h: u32,
    },
    #[error("mask has no foreground pixels")]
    EmptyMask,
}

/// Axis-aligned box in normalized coordinates, `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let invalid = |reason| GeometryError::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if ![x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("coordinate outside [0, 1]"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("degenerate or inverted extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{:.4},{:.4},{:.4},{:.4}]",
            self.x1, self.y1, self.x2, self.y2
        )
    }
}

/// Intersection over union of two boxes.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Share of `obj` that lies inside `region`.
pub fn overlap_fraction(obj: &BBox, region: &BBox) -> f64 {
    if region.contains(obj) {
        return 1.0;
    }
    (obj.intersection_area(region) / obj.area()).clamp(0.0, 1.0)
}

/// Row-major run-length mask. Runs alternate background/foreground and
/// start with a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRle {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl MaskRle {
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidMask("zero dimension".into()));
        }
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = width as u64 * height as u64;
        if total != expected {
            return Err(GeometryError::InvalidMask(format!(
                "run lengths sum to {total}, expected {expected}"
            )));
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Encodes a row-major bitmap into canonical runs (no interior zero runs).
    pub fn from_bits(width: u32, height: u32, bits: &[bool]) -> Result<Self, GeometryError> {
        if bits.len() as u64 != width as u64 * height as u64 {
            return Err(GeometryError::InvalidMask(format!(
                "bitmap has {} pixels, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Self::new(width, height, runs)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn to_bits(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity((self.width * self.height) as usize);
        for (i, &r) in self.runs.iter().enumerate() {
            out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        out
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Foreground runs as half-open `[start, end)` pixel intervals.
    fn foreground_spans(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as u64;
            (i % 2 == 1 && r > 0).then_some((start, pos))
        })
    }

    /// Tight bounding box of the foreground in normalized coordinates.
    pub fn bbox(&self) -> Result<BBox, GeometryError> {
        let w = self.width as u64;
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (u64::MAX, u64::MAX, 0u64, 0u64);
        let mut any = false;
        for (start, end) in self.foreground_spans() {
            any = true;
            let first_row = start / w;
            let last_row = (end - 1) / w;
            min_y = min_y.min(first_row);
            max_y = max_y.max(last_row);
            if first_row == last_row {
                min_x = min_x.min(start % w);
                max_x = max_x.max((end - 1) % w);
            } else {
                // a span that wraps reaches the last column of its first row
                // and the first column of its last row
                min_x = 0;
                max_x = w - 1;
            }
        }
        if !any {
            return Err(GeometryError::EmptyMask);
        }
        BBox::new(
            min_x as f64 / w as f64,
            min_y as f64 / self.height as f64,
            (max_x + 1) as f64 / w as f64,
            (max_y + 1) as f64 / self.height as f64,
        )
    }
}

impl fmt::Display for MaskRle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.width, self.height)?;
        for (i, r) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskRle {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| GeometryError::InvalidMask(format!("{why} in {s:?}"));
        let (dims, runs) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let (w, h) = dims.split_once('x').ok_or_else(|| bad("missing 'x'"))?;
        let width: u32 = w.parse().map_err(|_| bad("bad width"))?;
        let height: u32 = h.parse().map_err(|_| bad("bad height"))?;
        let runs = if runs.is_empty() {
            Vec::new()
        } else {
            runs.split(',')
                .map(|r| r.parse::<u32>().map_err(|_| bad("bad run length")))
                .collect::<Result<Vec<_>, _>>()?
        };
        MaskRle::new(width, height, runs)
    }
}

/// Pixel-exact IoU computed on the run intervals. Two empty masks score 0.
pub fn iou_mask(a: &MaskRle, b: &MaskRle) -> Result<f64, GeometryError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeometryError::DimensionMismatch {
            a_w: a.width,
            a_h: a.height,
            b_w: b.width,
            b_h: b.height,
        });
    }
    let sa: Vec<_> = a.foreground_spans().collect();
    let sb: Vec<_> = b.foreground_spans().collect();
    let (mut i, mut j, mut inter) = (0, 0, 0u64);
    while i < sa.len() && j < sb.len() {
        let lo = sa[i].0.max(sb[j].0);
        let hi = sa[i].1.min(sb[j].1);
        if hi > lo {
            inter += hi - lo;
        }
        if sa[i].1 < sb[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean of foreground pixel centers, normalized to `[0, 1]`.
pub fn centroid(m: &MaskRle) -> Result<(f64, f64), GeometryError> {
    let w = m.width as u64;
    let (mut sx, mut sy, mut n) = (0f64, 0f64, 0u64);
    for (start, end) in m.foreground_spans() {
        for p in start..end {
            sx += (p % w) as f64 + 0.5;
            sy += (p / w) as f64 + 0.5;
        }
        n += end - start;
    }
    if n == 0 {
        return Err(GeometryError::EmptyMask);
    }
    Ok((
        sx / n as f64 / m.width as f64,
        sy / n as f64 / m.height as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<MatchPair>, n_pred: usize, n_gt: usize) -> Self {
        pairs.sort_by_key(|p| (p.gt, p.pred));
        let mut pred_used = vec![false; n_pred];
        let mut gt_used = vec![false; n_gt];
        for p in &pairs {
            pred_used[p.pred] = true;
            gt_used[p.gt] = true;
        }
        let unmatched = |used: &[bool]| {
            used.iter()
                .enumerate()
                .filter(|(_, &u)| !u)
                .map(|(i, _)| i)
                .collect()
        };
        Self {
            unmatched_pred: unmatched(&pred_used),
            unmatched_gt: unmatched(&gt_used),
            pairs,
        }
    }

    pub fn total_score(&self) -> f64 {
        self.pairs.iter().map(|p| p.score).sum()
    }

    pub fn gt_for_pred(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.pred == pred).map(|p| p.gt)
    }
}

/// Greedy one-to-one matching: repeatedly take the admissible pair with the
/// highest score. Ties go to the lower gt index, then the lower pred index.
/// Pairs with a NaN score are never admissible.
pub fn greedy_match<P, G>(
    preds: &[P],
    gts: &[G],
    pair_score: impl Fn(usize, usize) -> f64,
    admissible: impl Fn(usize, usize) -> bool,
) -> MatchResult {
    let mut candidates = Vec::new();
    for p in 0..preds.len() {
        for g in 0..gts.len() {
            if admissible(p, g) {
                let score = pair_score(p, g);
                if !score.is_nan() {
                    candidates.push(MatchPair {
                        pred: p,
                        gt: g,
                        score,
                    });
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.gt.cmp(&b.gt))
            .then(a.pred.cmp(&b.pred))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            pairs.push(c);
        }
    }
    MatchResult::from_pairs(pairs, preds.len(), gts.len())
}

/// Size of a maximum-cardinality matching over the admissible pairs
/// (augmenting paths). Used to flag instances where greedy falls short.
pub fn max_matching_size(
    n_pred: usize,
    n_gt: usize,
    admissible: impl Fn(usize, usize) -> bool,
) -> usize {
    let adj: Vec<Vec<usize>> = (0..n_pred)
        .map(|p| (0..n_gt).filter(|&g| admissible(p, g)).collect())
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; n_gt];

    fn augment(
        p: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        gt_owner: &mut [Option<usize>],
    ) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if gt_owner[g].is_none_or(|q| augment(q, adj, seen, gt_owner)) {
                gt_owner[g] = Some(p);
                return true;
            }
        }
        false
    }

    let mut size = 0;
    for p in 0..n_pred {
        let mut seen = vec![false; n_gt];
        if augment(p, &adj, &mut seen, &mut gt_owner) {
            size += 1;
        }
    }
    size
}

/// Optimal one-to-one assignment: maximizes the number of admissible pairs,
/// then their total score (Hungarian method on a lifted weight matrix).
pub fn optimal_assignment(
    n_pred: usize,
    n_gt: usize,
    pair_score: impl Fn(usize, usize) -> f64,
    admissible: impl Fn(usize, usize) -> bool,
) -> MatchResult {
    if n_pred == 0 || n_gt == 0 {
        return MatchResult::from_pairs(Vec::new(), n_pred, n_gt);
    }
    // Rows must not outnumber columns.
    let transpose = n_pred > n_gt;
    let (rows, cols) = if transpose {
        (n_gt, n_pred)
    } else {
        (n_pred, n_gt)
    };
    let at = |r: usize, c: usize| if transpose { (c, r) } else { (r, c) };

    // Every admissible pair outweighs any sum of raw scores, so cardinality
    // dominates the objective.
    let mut max_abs = 0f64;
    for r in 0..rows {
        for c in 0..cols {
            let (p, g) = at(r, c);
            if admissible(p, g) {
                max_abs = max_abs.max(pair_score(p, g).abs());
            }
        }
    }
    let lift = 2.0 * (rows as f64) * (max_abs + 1.0);
    let weight = |r: usize, c: usize| {
        let (p, g) = at(r, c);
        if admissible(p, g) {
            let s = pair_score(p, g);
            if s.is_nan() {
                0.0
            } else {
                lift + s
            }
        } else {
            0.0
        }
    };

    // Minimize cost = -weight, 1-based potentials formulation.
    let inf = f64::INFINITY;
    let mut u = vec![0f64; rows + 1];
    let mut v = vec![0f64; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut col_row = vec![0usize; cols + 1];
    for i in 1..=rows {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = -weight(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    for j in 1..=cols {
        let i = col_row[j];
        if i == 0 {
            continue;
        }
        let (p, g) = at(i - 1, j - 1);
        if admissible(p, g) {
            let score = pair_score(p, g);
            if !score.is_nan() {
                pairs.push(MatchPair {
                    pred: p,
                    gt: g,
                    score,
                });
            }
        }
    }
    MatchResult::from_pairs(pairs, n_pred, n_gt)
}
