//! Consistent-hashing ring with one point per member.

use radon_core::model::AtomName;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn ring_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RingError {
    #[error("ring is empty")]
    Empty,
    #[error("{new} collides with {existing} at point {point:016x}")]
    Collision {
        point: u64,
        existing: AtomName,
        new: AtomName,
    },
    #[error("replication factor must be positive")]
    ZeroReplication,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingView {
    points: Vec<(u64, AtomName)>,
    version: u64,
    replication: usize,
}

impl RingView {
    pub fn new(replication: usize) -> Result<Self, RingError> {
        if replication == 0 {
            return Err(RingError::ZeroReplication);
        }
        Ok(Self {
            points: Vec::new(),
            version: 0,
            replication,
        })
    }

    /// Rebuilds a view from decoded parts, re-sorting and re-checking the
    /// points.
    pub fn from_parts(
        version: u64,
        replication: usize,
        members: impl IntoIterator<Item = AtomName>,
    ) -> Result<Self, RingError> {
        let mut view = Self::new(replication)?;
        for member in members {
            view.place(member)?;
        }
        view.version = version;
        Ok(view)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Configured replication factor.
    pub fn replication(&self) -> usize {
        self.replication
    }

    /// Replicas per key given the current membership.
    pub fn effective_replication(&self) -> usize {
        self.replication.min(self.points.len())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(u64, AtomName)] {
        &self.points
    }

    pub fn members(&self) -> impl Iterator<Item = &AtomName> {
        self.points.iter().map(|(_, m)| m)
    }

    pub fn contains(&self, member: &AtomName) -> bool {
        self.position(member).is_some()
    }

    fn position(&self, member: &AtomName) -> Option<usize> {
        self.points
            .binary_search_by_key(&ring_hash(member.as_str().as_bytes()), |(h, _)| *h)
            .ok()
            .filter(|&i| &self.points[i].1 == member)
    }

    fn place(&mut self, member: AtomName) -> Result<bool, RingError> {
        let point = ring_hash(member.as_str().as_bytes());
        match self.points.binary_search_by_key(&point, |(h, _)| *h) {
            Ok(i) if self.points[i].1 == member => Ok(false),
            Ok(i) => Err(RingError::Collision {
                point,
                existing: self.points[i].1.clone(),
                new: member,
            }),
            Err(i) => {
                self.points.insert(i, (point, member));
                Ok(true)
            }
        }
    }

    /// Adds a member, bumping the version. Returns false if it was
    /// already present.
    pub fn insert(&mut self, member: AtomName) -> Result<bool, RingError> {
        let added = self.place(member)?;
        if added {
            self.version += 1;
        }
        Ok(added)
    }

    fn first_at_or_after(&self, hash: u64) -> usize {
        let i = self.points.partition_point(|(h, _)| *h < hash);
        if i == self.points.len() {
            0
        } else {
            i
        }
    }

    /// Members responsible for a point: the first at or after it, then the
    /// following ones clockwise.
    pub fn responsible_for_hash(&self, hash: u64) -> Result<Vec<AtomName>, RingError> {
        if self.points.is_empty() {
            return Err(RingError::Empty);
        }
        let start = self.first_at_or_after(hash);
        let len = self.points.len();
        Ok((0..self.effective_replication())
            .map(|i| self.points[(start + i) % len].1.clone())
            .collect())
    }

    pub fn responsible_set(&self, key: &[u8]) -> Result<Vec<AtomName>, RingError> {
        self.responsible_for_hash(ring_hash(key))
    }

    pub fn primary(&self, key: &[u8]) -> Result<AtomName, RingError> {
        if self.points.is_empty() {
            return Err(RingError::Empty);
        }
        Ok(self.points[self.first_at_or_after(ring_hash(key))].1.clone())
    }

    pub fn is_responsible(&self, member: &AtomName, key: &[u8]) -> bool {
        self.responsible_set(key)
            .is_ok_and(|set| set.contains(member))
    }

    /// Next member clockwise from `member`'s point, or the primary of that
    /// point if `member` is not on the ring.
    pub fn successor(&self, member: &AtomName) -> Option<AtomName> {
        if self.points.is_empty() {
            return None;
        }
        let i = match self.position(member) {
            Some(i) => (i + 1) % self.points.len(),
            None => self.first_at_or_after(ring_hash(member.as_str().as_bytes())),
        };
        Some(self.points[i].1.clone())
    }
}
