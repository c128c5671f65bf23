//! Output-head bookkeeping: which classifier neuron currently represents
//! which real class or dream class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadRole {
    Free,
    Real(usize),
    Dream(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadTable {
    roles: Vec<HeadRole>,
    real: BTreeMap<usize, usize>,
    dream: BTreeMap<usize, usize>,
}

impl HeadTable {
    pub fn new(width: usize) -> Self {
        Self {
            roles: vec![HeadRole::Free; width],
            real: BTreeMap::new(),
            dream: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, head: usize) -> HeadRole {
        self.roles[head]
    }

    pub fn roles(&self) -> &[HeadRole] {
        &self.roles
    }

    pub fn head_of_real(&self, class: usize) -> Option<usize> {
        self.real.get(&class).copied()
    }

    pub fn head_of_dream(&self, dream: usize) -> Option<usize> {
        self.dream.get(&dream).copied()
    }

    fn heads_where(&self, pred: impl Fn(HeadRole) -> bool) -> Vec<usize> {
        (0..self.width()).filter(|&h| pred(self.roles[h])).collect()
    }

    pub fn real_heads(&self) -> Vec<usize> {
        self.heads_where(|r| matches!(r, HeadRole::Real(_)))
    }

    pub fn dream_heads(&self) -> Vec<usize> {
        self.heads_where(|r| matches!(r, HeadRole::Dream(_)))
    }

    pub fn free_heads(&self) -> Vec<usize> {
        self.heads_where(|r| r == HeadRole::Free)
    }

    /// Heads not claimed by a real class (dream-occupied or free).
    pub fn available_heads(&self) -> Vec<usize> {
        self.heads_where(|r| !matches!(r, HeadRole::Real(_)))
    }

    pub fn dream_ids(&self) -> Vec<usize> {
        self.dream.keys().copied().collect()
    }

    pub fn real_classes(&self) -> Vec<usize> {
        self.real.keys().copied().collect()
    }

    pub fn mask(&self, pred: impl Fn(HeadRole) -> bool) -> Vec<bool> {
        self.roles.iter().map(|&r| pred(r)).collect()
    }

    pub fn real_mask(&self) -> Vec<bool> {
        self.mask(|r| matches!(r, HeadRole::Real(_)))
    }

    /// Heads with any role.
    pub fn active_mask(&self) -> Vec<bool> {
        self.mask(|r| r != HeadRole::Free)
    }

    /// Puts real class `class` on `head`, evicting a resident dream.
    /// Returns the evicted dream id.
    pub fn assign_real(&mut self, class: usize, head: usize) -> Result<Option<usize>> {
        if self.real.contains_key(&class) {
            return Err(Error::invalid(format!("class {class} already has a head")));
        }
        let evicted = match self.roles.get(head) {
            None => return Err(Error::invalid(format!("head {head} out of range"))),
            Some(HeadRole::Real(c)) => {
                return Err(Error::NoAvailableHead(format!("head {head} already holds class {c}")))
            }
            Some(HeadRole::Dream(d)) => Some(*d),
            Some(HeadRole::Free) => None,
        };
        if let Some(d) = evicted {
            self.dream.remove(&d);
        }
        self.roles[head] = HeadRole::Real(class);
        self.real.insert(class, head);
        Ok(evicted)
    }

    /// Puts dream `dream` on a non-real head, evicting any resident dream.
    pub fn assign_dream(&mut self, dream: usize, head: usize) -> Result<Option<usize>> {
        if self.dream.contains_key(&dream) {
            return Err(Error::invalid(format!("dream {dream} already has a head")));
        }
        let evicted = match self.roles.get(head) {
            None => return Err(Error::invalid(format!("head {head} out of range"))),
            Some(HeadRole::Real(c)) => return Err(Error::NoAvailableHead(format!("head {head} holds real class {c}"))),
            Some(HeadRole::Dream(d)) => Some(*d),
            Some(HeadRole::Free) => None,
        };
        if let Some(d) = evicted {
            self.dream.remove(&d);
        }
        self.roles[head] = HeadRole::Dream(dream);
        self.dream.insert(dream, head);
        Ok(evicted)
    }

    pub fn remove_dream(&mut self, dream: usize) -> Option<usize> {
        let head = self.dream.remove(&dream)?;
        self.roles[head] = HeadRole::Free;
        Some(head)
    }

    /// Adds `count` free heads at the end.
    pub fn append_free(&mut self, count: usize) -> std::ops::Range<usize> {
        let start = self.width();
        self.roles.extend(std::iter::repeat_n(HeadRole::Free, count));
        start..self.width()
    }

    /// Checks that roles and reverse indices describe the same bijection.
    pub fn validate(&self) -> Result<()> {
        let mut real = 0;
        let mut dream = 0;
        for (h, role) in self.roles.iter().enumerate() {
            let ok = match *role {
                HeadRole::Free => true,
                HeadRole::Real(c) => {
                    real += 1;
                    self.real.get(&c) == Some(&h)
                }
                HeadRole::Dream(d) => {
                    dream += 1;
                    self.dream.get(&d) == Some(&h)
                }
            };
            if !ok {
                return Err(Error::invalid(format!("head {h} disagrees with reverse index")));
            }
        }
        if real != self.real.len() || dream != self.dream.len() {
            return Err(Error::invalid("reverse index holds stale entries"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_and_eviction() {
        let mut t = HeadTable::new(4);
        assert_eq!(t.assign_real(10, 0).unwrap(), None);
        assert_eq!(t.assign_dream(1, 2).unwrap(), None);
        assert_eq!(t.assign_dream(2, 2).unwrap(), Some(1));
        assert_eq!(t.head_of_dream(1), None);
        assert_eq!(t.assign_real(11, 2).unwrap(), Some(2));
        assert!(t.assign_dream(3, 0).is_err());
        assert!(t.assign_real(10, 1).is_err());
        assert_eq!(t.real_heads(), vec![0, 2]);
        assert_eq!(t.available_heads(), vec![1, 3]);
        t.validate().unwrap();
    }

    #[test]
    fn append_and_remove() {
        let mut t = HeadTable::new(2);
        let r = t.append_free(3);
        assert_eq!(r, 2..5);
        t.assign_dream(0, 4).unwrap();
        assert_eq!(t.remove_dream(0), Some(4));
        assert_eq!(t.free_heads().len(), 5);
        t.validate().unwrap();
    }
}
