//! Zero-copy load balancing between the two members of a pair.

use crate::engine::ReqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl Side {
    fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// A request decoding on one member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub id: ReqId,
    pub tokens: u64,
    /// Has a fresh copy on the other member and is between steps.
    pub movable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairMove {
    pub request: ReqId,
    pub from: Side,
}

#[derive(Clone, Copy)]
struct Item {
    c: Candidate,
    home: Side,
    side: Side,
}

const MAX_TOKEN_ROUNDS: usize = 64;

/// Moves that first bring batch counts within one of each other and then
/// shrink the token-sum gap. Each request moves at most once, and neither
/// objective ends worse than it started.
pub fn rebalance_pair(a: &[Candidate], b: &[Candidate]) -> Vec<PairMove> {
    let mut items: Vec<Item> = a
        .iter()
        .map(|&c| Item {
            c,
            home: Side::A,
            side: Side::A,
        })
        .chain(b.iter().map(|&c| Item {
            c,
            home: Side::B,
            side: Side::B,
        }))
        .collect();

    let sums = |items: &[Item]| {
        let mut s = [(0i64, 0i64); 2];
        for it in items {
            let k = (it.side == Side::B) as usize;
            s[k].0 += 1;
            s[k].1 += it.c.tokens as i64;
        }
        s
    };
    let free = |it: &Item| it.c.movable && it.side == it.home;

    // Counts: move the best-fitting request off the longer side.
    loop {
        let [(ca, ta), (cb, tb)] = sums(&items);
        if (ca - cb).abs() <= 1 {
            break;
        }
        let heavy = if ca > cb { Side::A } else { Side::B };
        let gap = if heavy == Side::A { ta - tb } else { tb - ta };
        let pick = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.side == heavy && free(it))
            .min_by_key(|(_, it)| ((gap - 2 * it.c.tokens as i64).abs(), std::cmp::Reverse(it.c.tokens), it.c.id))
            .map(|(k, _)| k);
        match pick {
            Some(k) => items[k].side = heavy.other(),
            None => break,
        }
    }

    // Tokens: best single move or swap that strictly narrows the gap
    // without loosening the count balance.
    for _ in 0..MAX_TOKEN_ROUNDS {
        let [(ca, ta), (cb, tb)] = sums(&items);
        let gap = (ta - tb).abs();
        if gap == 0 {
            break;
        }
        let heavy = if ta > tb { Side::A } else { Side::B };
        let (ch, cl) = if heavy == Side::A { (ca, cb) } else { (cb, ca) };
        let count_bound = (ca - cb).abs().max(1);
        let single_ok = ((ch - 1) - (cl + 1)).abs() <= count_bound;

        let mut best: Option<(i64, usize, Option<usize>)> = None;
        let mut consider = |new_gap: i64, x: usize, y: Option<usize>| {
            if new_gap < gap && best.is_none_or(|(g, _, _)| new_gap < g) {
                best = Some((new_gap, x, y));
            }
        };
        let mut light: Vec<(i64, usize)> = items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.side == heavy.other() && free(it))
            .map(|(k, it)| (it.c.tokens as i64, k))
            .collect();
        light.sort_unstable();
        for (k, it) in items.iter().enumerate() {
            if it.side != heavy || !free(it) {
                continue;
            }
            let t = it.c.tokens as i64;
            if single_ok {
                consider((gap - 2 * t).abs(), k, None);
            }
            // Swap with the light-side request closest to t - gap/2.
            let want = 2 * t - gap;
            let pos = light.partition_point(|&(u, _)| 2 * u < want);
            for &(u, j) in light[pos.saturating_sub(1)..(pos + 1).min(light.len())].iter() {
                consider((gap - 2 * (t - u)).abs(), k, Some(j));
            }
        }
        match best {
            Some((_, x, y)) => {
                items[x].side = items[x].side.other();
                if let Some(y) = y {
                    items[y].side = items[y].side.other();
                }
            }
            None => break,
        }
    }

    items
        .iter()
        .filter(|it| it.side != it.home)
        .map(|it| PairMove {
            request: it.c.id,
            from: it.home,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cands(start: usize, tokens: &[u64], movable: bool) -> Vec<Candidate> {
        tokens
            .iter()
            .enumerate()
            .map(|(k, &t)| Candidate {
                id: ReqId(start + k),
                tokens: t,
                movable,
            })
            .collect()
    }

    /// (count gap, token gap) after applying the moves.
    fn outcome(a: &[Candidate], b: &[Candidate], moves: &[PairMove]) -> (i64, i64) {
        let mut ca = a.len() as i64;
        let mut cb = b.len() as i64;
        let mut ta: i64 = a.iter().map(|c| c.tokens as i64).sum();
        let mut tb: i64 = b.iter().map(|c| c.tokens as i64).sum();
        for m in moves {
            let t = a.iter().chain(b).find(|c| c.id == m.request).unwrap().tokens as i64;
            match m.from {
                Side::A => {
                    ca -= 1;
                    cb += 1;
                    ta -= t;
                    tb += t;
                }
                Side::B => {
                    cb -= 1;
                    ca += 1;
                    tb -= t;
                    ta += t;
                }
            }
        }
        ((ca - cb).abs(), (ta - tb).abs())
    }

    /// Smallest token gap with counts within one, over every assignment.
    fn exhaustive(all: &[u64]) -> i64 {
        let n = all.len();
        let total: i64 = all.iter().map(|&t| t as i64).sum();
        let mut best = i64::MAX;
        for mask in 0u32..(1 << n) {
            let ca = mask.count_ones() as i64;
            if (2 * ca - n as i64).abs() > 1 {
                continue;
            }
            let sa: i64 = (0..n).filter(|k| mask & (1 << k) != 0).map(|k| all[k] as i64).sum();
            best = best.min((2 * sa - total).abs());
        }
        best
    }

    #[test]
    fn four_requests_split_evenly() {
        let a = cands(0, &[1000, 1000, 100, 100], true);
        let moves = rebalance_pair(&a, &[]);
        assert_eq!(outcome(&a, &[], &moves), (0, 0));
        assert_eq!(exhaustive(&[1000, 1000, 100, 100]), 0);
    }

    #[test]
    fn nothing_movable_means_no_moves() {
        let a = cands(0, &[500; 7], false);
        let b = cands(7, &[10; 1], false);
        assert!(rebalance_pair(&a, &b).is_empty());
    }

    #[test]
    fn balanced_pair_is_a_fixed_point() {
        let a = cands(0, &[300, 200, 100, 400, 250, 150], true);
        let b = cands(6, &[250, 150, 350, 200, 300, 150], true);
        assert!(rebalance_pair(&a, &b).is_empty());
    }

    #[test]
    fn nine_eleven_becomes_ten_ten() {
        let a = cands(0, &[500; 9], true);
        let b = cands(9, &[500; 11], true);
        let moves = rebalance_pair(&a, &b);
        assert_eq!(moves.len(), 1);
        assert_eq!(moves[0].from, Side::B);
        assert_eq!(outcome(&a, &b, &moves), (0, 0));
    }

    #[test]
    fn partial_movability_respected() {
        let mut a = cands(0, &[900, 800, 700, 600], false);
        a[3].movable = true;
        let moves = rebalance_pair(&a, &[]);
        assert_eq!(moves, vec![PairMove { request: ReqId(3), from: Side::A }]);
    }

    proptest! {
        #[test]
        fn never_worsens_either_objective(
            ta in prop::collection::vec((1u64..3000, any::<bool>()), 0..12),
            tb in prop::collection::vec((1u64..3000, any::<bool>()), 0..12),
        ) {
            let a: Vec<Candidate> = ta.iter().enumerate()
                .map(|(k, &(t, m))| Candidate { id: ReqId(k), tokens: t, movable: m }).collect();
            let b: Vec<Candidate> = tb.iter().enumerate()
                .map(|(k, &(t, m))| Candidate { id: ReqId(100 + k), tokens: t, movable: m }).collect();
            let moves = rebalance_pair(&a, &b);
            let (c0, t0) = outcome(&a, &b, &[]);
            let (c1, t1) = outcome(&a, &b, &moves);
            let excess = |c: i64| (c - 1).max(0);
            prop_assert!(excess(c1) <= excess(c0));
            if excess(c1) == excess(c0) && c0 <= 1 {
                prop_assert!(t1 <= t0);
            }
            for m in &moves {
                let c = a.iter().chain(&b).find(|c| c.id == m.request).unwrap();
                prop_assert!(c.movable);
            }
            let mut ids: Vec<ReqId> = moves.iter().map(|m| m.request).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), moves.len());
        }

        #[test]
        fn all_movable_balances_counts(
            ta in prop::collection::vec(1u64..3000, 0..10),
            tb in prop::collection::vec(1u64..3000, 0..10),
        ) {
            let a = cands(0, &ta, true);
            let b = cands(100, &tb, true);
            let moves = rebalance_pair(&a, &b);
            let (c, t) = outcome(&a, &b, &moves);
            prop_assert!(c <= 1);
            let all: Vec<u64> = ta.iter().chain(&tb).copied().collect();
            // Greedy is not exact, but never strays past the largest request.
            let opt = exhaustive(&all);
            let largest = all.iter().copied().max().unwrap_or(0) as i64;
            prop_assert!(t <= opt + largest);
        }
    }
}
