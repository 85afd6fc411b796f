//! Round-robin choke rotation: a bounded window of unchoked peers walks the
//! session ring on a timer, so every peer gets upload slots without the
//! seeder ever exceeding its concurrency budget.

pub type SessionId = u64;

/// Receives choke state transitions from the manager.
pub trait ChokeTarget {
    /// Called when the peer's state actually changes; `choked = false`
    /// means the peer just gained an upload slot.
    fn deliver(&self, choked: bool);
}

struct Member<T> {
    id: SessionId,
    target: T,
    unchoked: bool,
    joined_tick: u64,
    first_unchoked_tick: Option<u64>,
}

/// Maintains the invariant that at every instant exactly
/// `min(members, quota)` peers are unchoked, where the quota is
/// `max(1, ceil(fraction * members))`.
///
/// Membership changes re-establish the bound immediately; the timer tick
/// only advances the window.
pub struct ChokeManager<T> {
    members: Vec<Member<T>>,
    cursor: usize,
    fraction: f64,
    ticks: u64,
    worst_wait: u64,
    removed_never_unchoked: u64,
}

impl<T: ChokeTarget> ChokeManager<T> {
    pub fn new(fraction: f64) -> Self {
        assert!(
            fraction > 0.0 && fraction <= 1.0,
            "unchoke fraction must be in (0, 1]"
        );
        ChokeManager {
            members: Vec::new(),
            cursor: 0,
            fraction,
            ticks: 0,
            worst_wait: 0,
            removed_never_unchoked: 0,
        }
    }

    pub fn quota(&self) -> usize {
        let n = self.members.len();
        if n == 0 {
            return 0;
        }
        ((self.fraction * n as f64).ceil() as usize).max(1)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Longest gap, in ticks, any peer has waited between joining the ring
    /// and its first upload slot. Preserved across departures.
    pub fn worst_unchoke_wait(&self) -> u64 {
        self.worst_wait
    }

    /// Peers that left the ring without ever holding an upload slot.
    pub fn removed_never_unchoked(&self) -> u64 {
        self.removed_never_unchoked
    }

    /// Adds a peer at the back of the ring. It starts choked unless the
    /// current window happens to cover its slot.
    pub fn add(&mut self, id: SessionId, target: T) {
        debug_assert!(self.members.iter().all(|m| m.id != id));
        self.members.push(Member {
            id,
            target,
            unchoked: false,
            joined_tick: self.ticks,
            first_unchoked_tick: None,
        });
        self.apply_window();
    }

    /// Drops a peer. The freed slot is immediately granted to the next
    /// peer the window now covers.
    pub fn remove(&mut self, id: SessionId) -> bool {
        let Some(idx) = self.members.iter().position(|m| m.id == id) else {
            return false;
        };
        if self.members[idx].first_unchoked_tick.is_none() {
            self.removed_never_unchoked += 1;
        }
        self.members.remove(idx);
        if self.members.is_empty() {
            self.cursor = 0;
            return true;
        }
        if idx < self.cursor {
            self.cursor -= 1;
        }
        self.cursor %= self.members.len();
        self.apply_window();
        true
    }

    /// Advances the window by one quota so the next group of peers gets the
    /// upload slots.
    pub fn tick(&mut self) {
        self.ticks += 1;
        if self.members.is_empty() {
            return;
        }
        self.cursor = (self.cursor + self.quota()) % self.members.len();
        self.apply_window();
    }

    pub fn unchoked_ids(&self) -> Vec<SessionId> {
        self.members
            .iter()
            .filter(|m| m.unchoked)
            .map(|m| m.id)
            .collect()
    }

    pub fn unchoked_count(&self) -> usize {
        self.members.iter().filter(|m| m.unchoked).count()
    }

    fn apply_window(&mut self) {
        let n = self.members.len();
        let take = self.quota().min(n);
        let now = self.ticks;
        for (i, member) in self.members.iter_mut().enumerate() {
            let distance = (i + n - self.cursor) % n;
            let want = distance < take;
            if member.unchoked != want {
                member.unchoked = want;
                if want && member.first_unchoked_tick.is_none() {
                    member.first_unchoked_tick = Some(now);
                    self.worst_wait = self.worst_wait.max(now - member.joined_tick);
                }
                member.target.deliver(!want);
            }
        }
    }
}
