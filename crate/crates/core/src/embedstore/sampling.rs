//! Dataset splitting and without-replacement sampling of triplets and
//! labeled pairs. Sampling is stratified: a word is chosen uniformly among
//! words that still have unused candidates, then a candidate is chosen
//! uniformly within that word.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledPair, LayerwiseEmbedding, Triplet};
use crate::error::{Error, Result};

const RATIO_TOLERANCE: f64 = 1e-9;

/// Shuffle `items` with `seed` and cut them into parts sized by `ratios`
/// (two or three parts). Sizes use largest-remainder apportionment; ties
/// go to the earliest part. Each part keeps the input order of its members.
pub fn split<T: Clone>(items: &[T], ratios: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if !(2..=3).contains(&ratios.len()) {
        return Err(Error::BadRatio(format!(
            "expected 2 or 3 ratios, got {}",
            ratios.len()
        )));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::BadRatio(format!("ratios must be non-negative: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > RATIO_TOLERANCE {
        return Err(Error::BadRatio(format!("ratios sum to {sum}, not 1")));
    }
    if items.is_empty() {
        return Err(Error::EmptyData("cannot split an empty dataset".into()));
    }

    let n = items.len();
    let sizes = apportion(n, ratios);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        parts.push(idx.into_iter().map(|i| items[i].clone()).collect());
        start += size;
    }
    Ok(parts)
}

fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas
        .iter()
        .map(|q| (q + RATIO_TOLERANCE).floor() as usize)
        .collect();
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut by_remainder: Vec<usize> = (0..ratios.len()).collect();
    let frac = |i: usize| quotas[i] - sizes[i] as f64;
    by_remainder.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap().then(a.cmp(&b)));
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// A finite set of candidates for one word that can be drawn from uniformly
/// and enumerated exhaustively.
trait CandidateSpace {
    type Key: Copy + Eq + Hash;
    fn total(&self) -> u128;
    fn draw(&self, rng: &mut ChaCha8Rng) -> Self::Key;
    fn enumerate(&self) -> Vec<Self::Key>;
}

/// Without-replacement draws across words: uniform over words with unused
/// candidates, then uniform within the word. Falls back to an explicit
/// remainder list once half of a word's space is used.
struct StratifiedPool<S: CandidateSpace> {
    spaces: Vec<S>,
    seen: Vec<HashSet<S::Key>>,
    remaining: Vec<Option<Vec<S::Key>>>,
    active: Vec<usize>,
}

impl<S: CandidateSpace> StratifiedPool<S> {
    fn new(spaces: Vec<S>) -> Self {
        let active = (0..spaces.len()).filter(|&w| spaces[w].total() > 0).collect();
        let n = spaces.len();
        Self {
            spaces,
            seen: (0..n).map(|_| HashSet::new()).collect(),
            remaining: (0..n).map(|_| None).collect(),
            active,
        }
    }

    fn total(&self) -> u128 {
        self.spaces.iter().map(|s| s.total()).sum()
    }

    fn has_candidates(&self) -> bool {
        !self.active.is_empty()
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Option<S::Key> {
        while !self.active.is_empty() {
            let slot = rng.random_range(0..self.active.len());
            let w = self.active[slot];
            let total = self.spaces[w].total();
            if self.seen[w].len() as u128 >= total {
                self.active.remove(slot);
                continue;
            }
            if self.remaining[w].is_none() && 2 * self.seen[w].len() as u128 >= total {
                let seen = &self.seen[w];
                let rest = self.spaces[w]
                    .enumerate()
                    .into_iter()
                    .filter(|k| !seen.contains(k))
                    .collect();
                self.remaining[w] = Some(rest);
            }
            let key = match &mut self.remaining[w] {
                Some(rest) => {
                    let i = rng.random_range(0..rest.len());
                    rest.swap_remove(i)
                }
                None => loop {
                    let k = self.spaces[w].draw(rng);
                    if !self.seen[w].contains(&k) {
                        break k;
                    }
                },
            };
            self.seen[w].insert(key);
            return Some(key);
        }
        None
    }

    fn enumerate_all(&self) -> Vec<S::Key> {
        self.spaces.iter().flat_map(|s| s.enumerate()).collect()
    }
}

/// Candidate triples for one cell: `x0` from `first`, `x1` from `second`
/// (distinct from `x0` when the sets coincide), `x2` from `third`.
struct TripletCell {
    first: Vec<usize>,
    second: Vec<usize>,
    third: Vec<usize>,
    shared: bool,
}

impl TripletCell {
    fn count(&self) -> u128 {
        let second = self.second.len() as u128 - u128::from(self.shared);
        self.first.len() as u128 * second * self.third.len() as u128
    }
}

struct WordTriplets {
    cells: Vec<TripletCell>,
    weights: Option<WeightedIndex<f64>>,
    total: u128,
}

impl WordTriplets {
    fn new(cells: Vec<TripletCell>) -> Self {
        let cells: Vec<TripletCell> = cells.into_iter().filter(|c| c.count() > 0).collect();
        let total = cells.iter().map(TripletCell::count).sum();
        let weights = WeightedIndex::new(cells.iter().map(|c| c.count() as f64)).ok();
        Self {
            cells,
            weights,
            total,
        }
    }
}

impl CandidateSpace for WordTriplets {
    type Key = (usize, usize, usize);

    fn total(&self) -> u128 {
        self.total
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Self::Key {
        let cell = &self.cells[self.weights.as_ref().expect("nonempty space").sample(rng)];
        let i0 = rng.random_range(0..cell.first.len());
        let x0 = cell.first[i0];
        let x1 = if cell.shared {
            let mut j = rng.random_range(0..cell.second.len() - 1);
            if j >= i0 {
                j += 1;
            }
            cell.second[j]
        } else {
            cell.second[rng.random_range(0..cell.second.len())]
        };
        let x2 = cell.third[rng.random_range(0..cell.third.len())];
        (x0, x1, x2)
    }

    fn enumerate(&self) -> Vec<Self::Key> {
        let mut out = Vec::new();
        for c in &self.cells {
            for &x0 in &c.first {
                for &x1 in &c.second {
                    if x1 == x0 {
                        continue;
                    }
                    for &x2 in &c.third {
                        out.push((x0, x1, x2));
                    }
                }
            }
        }
        out
    }
}

fn group_by_word(records: &[&LayerwiseEmbedding]) -> BTreeMap<u32, Vec<usize>> {
    let mut words: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        words.entry(r.word_id).or_default().push(i);
    }
    words
}

fn word_triplets(
    records: &[&LayerwiseEmbedding],
    members: &[usize],
    use_aspect_b: bool,
) -> WordTriplets {
    let mut senses: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in members {
        senses.entry(records[i].sense_label).or_default().push(i);
    }
    let mut cells = Vec::new();
    if !use_aspect_b {
        for (&s, same) in &senses {
            let other = members
                .iter()
                .copied()
                .filter(|&i| records[i].sense_label != s)
                .collect();
            cells.push(TripletCell {
                first: same.clone(),
                second: same.clone(),
                third: other,
                shared: true,
            });
        }
    } else {
        let aux = |i: usize| records[i].aux_label.expect("aux labels checked");
        let mut by_cell: BTreeMap<(u32, i32), Vec<usize>> = BTreeMap::new();
        for &i in members {
            by_cell.entry((records[i].sense_label, aux(i))).or_default().push(i);
        }
        for (&(s, b), first) in &by_cell {
            let second = senses[&s].iter().copied().filter(|&i| aux(i) != b).collect();
            let third = members
                .iter()
                .copied()
                .filter(|&i| records[i].sense_label != s && aux(i) == b)
                .collect();
            cells.push(TripletCell {
                first: first.clone(),
                second,
                third,
                shared: false,
            });
        }
    }
    WordTriplets::new(cells)
}

/// Draw up to `n` distinct triplets (all valid triplets when fewer exist).
///
/// Triplets are formed within a word: `x0` and `x1` share a sense, `x2` has
/// a different one. With `use_aspect_b`, `x0` and `x2` also share the aux
/// label while `x1` carries a different one.
pub fn sample_triplets(
    records: &[&LayerwiseEmbedding],
    n: usize,
    seed: u64,
    use_aspect_b: bool,
) -> Result<Vec<Triplet>> {
    if use_aspect_b && records.iter().any(|r| r.aux_label.is_none()) {
        return Err(Error::NoValidTriplet(
            "two-aspect triplets need aux labels on every record".into(),
        ));
    }
    let spaces: Vec<WordTriplets> = group_by_word(records)
        .values()
        .map(|members| word_triplets(records, members, use_aspect_b))
        .collect();
    let mut pool = StratifiedPool::new(spaces);
    if !pool.has_candidates() {
        return Err(Error::NoValidTriplet(if use_aspect_b {
            "no word has a sense/aux combination satisfying both conditions".into()
        } else {
            "no word has two occurrences of one sense and one of another".into()
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_triplet = |(a, b, c): (usize, usize, usize)| Triplet {
        x0: records[a].occurrence_id,
        x1: records[b].occurrence_id,
        x2: records[c].occurrence_id,
    };
    if pool.total() <= n as u128 {
        let mut all = pool.enumerate_all();
        all.shuffle(&mut rng);
        return Ok(all.into_iter().map(to_triplet).collect());
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        match pool.draw(&mut rng) {
            Some(key) => out.push(to_triplet(key)),
            None => break,
        }
    }
    Ok(out)
}

/// Unordered same-sense or cross-sense pairs within one word.
struct WordPairs {
    members: Vec<usize>,
    sense_groups: Vec<Vec<usize>>,
    /// Sense group index of each member.
    group_of: Vec<usize>,
    same: bool,
    weights: Option<WeightedIndex<f64>>,
    total: u128,
}

impl WordPairs {
    fn new(records: &[&LayerwiseEmbedding], members: &[usize], same: bool) -> Self {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (pos, &i) in members.iter().enumerate() {
            groups.entry(records[i].sense_label).or_default().push(pos);
        }
        let sense_groups: Vec<Vec<usize>> = groups.into_values().collect();
        let mut group_of = vec![0; members.len()];
        for (g, positions) in sense_groups.iter().enumerate() {
            for &p in positions {
                group_of[p] = g;
            }
        }
        let n = members.len() as u128;
        let same_total: u128 = sense_groups
            .iter()
            .map(|g| {
                let m = g.len() as u128;
                m * m.saturating_sub(1) / 2
            })
            .sum();
        let total = if same {
            same_total
        } else {
            n * n.saturating_sub(1) / 2 - same_total
        };
        let weights = if same {
            WeightedIndex::new(sense_groups.iter().map(|g| {
                let m = g.len() as f64;
                m * (m - 1.0) / 2.0
            }))
            .ok()
        } else {
            WeightedIndex::new(
                group_of
                    .iter()
                    .map(|&g| (members.len() - sense_groups[g].len()) as f64),
            )
            .ok()
        };
        Self {
            members: members.to_vec(),
            sense_groups,
            group_of,
            same,
            weights: if total > 0 { weights } else { None },
            total,
        }
    }

    fn key(&self, a: usize, b: usize) -> (usize, usize) {
        let (a, b) = (self.members[a], self.members[b]);
        (a.min(b), a.max(b))
    }
}

impl CandidateSpace for WordPairs {
    type Key = (usize, usize);

    fn total(&self) -> u128 {
        self.total
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Self::Key {
        let weights = self.weights.as_ref().expect("nonempty space");
        if self.same {
            let group = &self.sense_groups[weights.sample(rng)];
            let i = rng.random_range(0..group.len());
            let mut j = rng.random_range(0..group.len() - 1);
            if j >= i {
                j += 1;
            }
            self.key(group[i], group[j])
        } else {
            // first endpoint weighted by its number of cross-sense partners
            let a = weights.sample(rng);
            let own = self.group_of[a];
            let others = self.members.len() - self.sense_groups[own].len();
            let r = rng.random_range(0..others);
            let b = (0..self.members.len())
                .filter(|&p| self.group_of[p] != own)
                .nth(r)
                .expect("partner exists");
            self.key(a, b)
        }
    }

    fn enumerate(&self) -> Vec<Self::Key> {
        let mut out = Vec::new();
        for a in 0..self.members.len() {
            for b in a + 1..self.members.len() {
                if (self.group_of[a] == self.group_of[b]) == self.same {
                    out.push(self.key(a, b));
                }
            }
        }
        out
    }
}

/// Draw up to `n` distinct WiC-style pairs, alternating same-sense and
/// cross-sense draws so the classes stay within one of each other. When one
/// class runs out the other keeps filling.
pub fn sample_pairs(
    records: &[&LayerwiseEmbedding],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledPair>> {
    let words = group_by_word(records);
    let mut same = StratifiedPool::new(
        words
            .values()
            .map(|m| WordPairs::new(records, m, true))
            .collect(),
    );
    let mut cross = StratifiedPool::new(
        words
            .values()
            .map(|m| WordPairs::new(records, m, false))
            .collect(),
    );
    if !same.has_candidates() && !cross.has_candidates() {
        return Err(Error::NoValidPair(
            "no word has two or more occurrences".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_pair = |(a, b): (usize, usize), label| LabeledPair {
        x1: records[a].occurrence_id,
        x2: records[b].occurrence_id,
        label,
    };
    let mut out = Vec::with_capacity(n);
    let mut want_same = true;
    while out.len() < n {
        let (first, second) = if want_same {
            (&mut same, &mut cross)
        } else {
            (&mut cross, &mut same)
        };
        let label = want_same;
        if let Some(k) = first.draw(&mut rng) {
            out.push(to_pair(k, label));
        } else if let Some(k) = second.draw(&mut rng) {
            out.push(to_pair(k, !label));
        } else {
            break;
        }
        want_same = !want_same;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LayerTensor;

    fn rec(id: u64, word: u32, sense: u32, aux: Option<i32>) -> LayerwiseEmbedding {
        LayerwiseEmbedding {
            occurrence_id: id,
            word_id: word,
            sense_label: sense,
            aux_label: aux,
            tensor: LayerTensor::zeros(1, 1),
        }
    }

    fn brute_force_triplets(records: &[&LayerwiseEmbedding], use_b: bool) -> Vec<Triplet> {
        let mut out = Vec::new();
        for a in records {
            for b in records {
                for c in records {
                    let t = Triplet {
                        x0: a.occurrence_id,
                        x1: b.occurrence_id,
                        x2: c.occurrence_id,
                    };
                    if t.is_valid(a, b, c, use_b) {
                        out.push(t);
                    }
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let items: Vec<u32> = (0..10).collect();
        let parts = split(&items, &[0.9, 0.1], 3).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (9, 1));

        let parts = split(&items, &[0.8, 0.2], 3).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (8, 2));
        let inner = split(&parts[0], &[0.9, 0.1], 4).unwrap();
        assert_eq!((inner[0].len(), inner[1].len()), (7, 1));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let items: Vec<u32> = (0..37).collect();
        let a = split(&items, &[0.7, 0.2, 0.1], 9).unwrap();
        let b = split(&items, &[0.7, 0.2, 0.1], 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u32> = a.concat();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_ne!(a, split(&items, &[0.7, 0.2, 0.1], 10).unwrap());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let items = [1, 2, 3];
        assert!(matches!(split(&items, &[0.5, 0.4], 0), Err(Error::BadRatio(_))));
        assert!(matches!(split(&items, &[1.0], 0), Err(Error::BadRatio(_))));
        assert!(matches!(split(&items, &[1.2, -0.2], 0), Err(Error::BadRatio(_))));
        let empty: [u8; 0] = [];
        assert!(split(&empty, &[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn single_word_aab_yields_both_orderings() {
        let data = [rec(1, 0, 0, None), rec(2, 0, 0, None), rec(3, 0, 1, None)];
        let refs: Vec<_> = data.iter().collect();
        let expected = brute_force_triplets(&refs, false);
        assert_eq!(expected.len(), 2);
        let mut got = sample_triplets(&refs, 10, 0, false).unwrap();
        got.sort();
        assert_eq!(got, expected);
        let one = sample_triplets(&refs, 1, 5, false).unwrap();
        assert_eq!(one.len(), 1);
        assert!(expected.contains(&one[0]));
    }

    #[test]
    fn one_sense_per_word_has_no_triplet() {
        let data = [rec(1, 0, 0, None), rec(2, 0, 0, None), rec(3, 1, 1, None)];
        let refs: Vec<_> = data.iter().collect();
        assert!(matches!(
            sample_triplets(&refs, 5, 0, false),
            Err(Error::NoValidTriplet(_))
        ));
    }

    #[test]
    fn aspect_b_requires_aux_labels() {
        let data = [rec(1, 0, 0, None), rec(2, 0, 0, Some(1)), rec(3, 0, 1, Some(1))];
        let refs: Vec<_> = data.iter().collect();
        assert!(matches!(
            sample_triplets(&refs, 5, 0, true),
            Err(Error::NoValidTriplet(_))
        ));
    }

    #[test]
    fn enumeration_matches_brute_force() {
        let mut data = Vec::new();
        let mut id = 0;
        for word in 0..3u32 {
            for i in 0..7u32 {
                data.push(rec(id, word, word * 10 + i % (word + 2), Some((i % 3) as i32)));
                id += 1;
            }
        }
        let refs: Vec<_> = data.iter().collect();
        for use_b in [false, true] {
            let expected = brute_force_triplets(&refs, use_b);
            let mut got = sample_triplets(&refs, 1_000_000, 1, use_b).unwrap();
            got.sort();
            assert_eq!(got, expected, "use_b={use_b}");
        }
    }

    #[test]
    fn sampled_triplets_are_valid_and_distinct() {
        let mut data = Vec::new();
        for id in 0..300u64 {
            let word = (id % 5) as u32;
            data.push(rec(id, word, word * 3 + (id / 5 % 3) as u32, Some((id / 15 % 2) as i32)));
        }
        let refs: Vec<_> = data.iter().collect();
        for use_b in [false, true] {
            let got = sample_triplets(&refs, 500, 7, use_b).unwrap();
            assert_eq!(got.len(), 500);
            let unique: HashSet<_> = got.iter().collect();
            assert_eq!(unique.len(), 500);
            for t in &got {
                let (a, b, c) = (&data[t.x0 as usize], &data[t.x1 as usize], &data[t.x2 as usize]);
                assert!(t.is_valid(a, b, c, use_b));
            }
            assert_eq!(got, sample_triplets(&refs, 500, 7, use_b).unwrap());
        }
    }

    #[test]
    fn only_pair_options() {
        let data = [rec(1, 0, 0, None), rec(2, 0, 0, None)];
        let refs: Vec<_> = data.iter().collect();
        let p = sample_pairs(&refs, 1, 0).unwrap();
        assert_eq!(p, vec![LabeledPair { x1: 1, x2: 2, label: true }]);

        let data = [rec(1, 0, 0, None), rec(2, 0, 1, None)];
        let refs: Vec<_> = data.iter().collect();
        let p = sample_pairs(&refs, 1, 0).unwrap();
        assert_eq!(p, vec![LabeledPair { x1: 1, x2: 2, label: false }]);
    }

    #[test]
    fn pairs_need_repeated_word() {
        let data = [rec(1, 0, 0, None), rec(2, 1, 0, None)];
        let refs: Vec<_> = data.iter().collect();
        assert!(matches!(sample_pairs(&refs, 3, 0), Err(Error::NoValidPair(_))));
    }

    #[test]
    fn balanced_pair_sampling() {
        let mut data = Vec::new();
        for id in 0..400u64 {
            let word = (id % 10) as u32;
            data.push(rec(id, word, word * 2 + (id / 10 % 2) as u32, None));
        }
        let refs: Vec<_> = data.iter().collect();
        let pairs = sample_pairs(&refs, 1000, 3).unwrap();
        assert_eq!(pairs.len(), 1000);
        let trues = pairs.iter().filter(|p| p.label).count();
        assert!((499..=501).contains(&trues), "{trues}");
        let unique: HashSet<_> = pairs.iter().map(|p| (p.x1, p.x2)).collect();
        assert_eq!(unique.len(), 1000);
        for p in &pairs {
            let (a, b) = (&data[p.x1 as usize], &data[p.x2 as usize]);
            assert_eq!(a.word_id, b.word_id);
            assert_eq!(p.label, a.sense_label == b.sense_label);
            assert_ne!(p.x1, p.x2);
        }
    }
}
