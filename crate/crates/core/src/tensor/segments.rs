use super::TensorError;

/// A partition of `0..source_len` into ordered groups (CSR layout).
///
/// Group `g` owns `members[offsets[g]..offsets[g + 1]]`. Every reduction over a
/// group walks its members in exactly this order, so callers that fix the
/// member order fix the floating-point result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    members: Vec<usize>,
    group_of: Vec<usize>,
}

impl Segments {
    /// Builds from explicit member lists. Every index in `0..n` must appear exactly once.
    pub fn from_groups(groups: &[Vec<usize>]) -> Result<Self, TensorError> {
        let n: usize = groups.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut members = Vec::with_capacity(n);
        let mut group_of = vec![usize::MAX; n];
        offsets.push(0);
        for (g, group) in groups.iter().enumerate() {
            for &m in group {
                if m >= n {
                    return Err(TensorError::IndexOutOfRange { index: m, len: n });
                }
                if group_of[m] != usize::MAX {
                    return Err(TensorError::InvalidSegments(format!(
                        "index {m} assigned to more than one group"
                    )));
                }
                group_of[m] = g;
                members.push(m);
            }
            offsets.push(members.len());
        }
        Ok(Self {
            offsets,
            members,
            group_of,
        })
    }

    /// Groups by an index map `map[i] = group`, members in increasing source order.
    pub fn from_index_map(map: &[usize], groups: usize) -> Result<Self, TensorError> {
        let mut lists = vec![Vec::new(); groups];
        for (i, &g) in map.iter().enumerate() {
            if g >= groups {
                return Err(TensorError::IndexOutOfRange { index: g, len: groups });
            }
            lists[g].push(i);
        }
        Self::from_groups(&lists)
    }

    /// Consecutive runs of the given lengths over `0..Σ lengths`.
    pub fn contiguous(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        let mut group_of = Vec::new();
        for (g, &len) in lengths.iter().enumerate() {
            group_of.extend(std::iter::repeat(g).take(len));
            offsets.push(group_of.len());
        }
        let members = (0..group_of.len()).collect();
        Self {
            offsets,
            members,
            group_of,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Length of the partitioned index range.
    pub fn source_len(&self) -> usize {
        self.members.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    pub fn group_len(&self, g: usize) -> usize {
        self.offsets[g + 1] - self.offsets[g]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.num_groups()).map(move |g| self.group(g))
    }

    /// The group of source index `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    /// Source index → group map.
    pub fn index_map(&self) -> &[usize] {
        &self.group_of
    }

    pub fn has_empty_group(&self) -> bool {
        self.offsets.windows(2).any(|w| w[0] == w[1])
    }
}
