//! Branch list of the IEEE 39-bus (New England) test system, used only to
//! derive default dip depths and coupling weights from hop distances.

use std::collections::{HashMap, VecDeque};

use super::BusId;

/// Transmission lines and transformers as (from, to) bus pairs.
pub const IEEE39_BRANCHES: &[(u32, u32)] = &[
    (1, 2), (1, 39), (2, 3), (2, 25), (2, 30), (3, 4), (3, 18), (4, 5),
    (4, 14), (5, 6), (5, 8), (6, 7), (6, 11), (6, 31), (7, 8), (8, 9),
    (9, 39), (10, 11), (10, 13), (10, 32), (12, 11), (12, 13), (13, 14),
    (14, 15), (15, 16), (16, 17), (16, 19), (16, 21), (16, 24), (17, 18),
    (17, 27), (19, 20), (19, 33), (20, 34), (21, 22), (22, 23), (22, 35),
    (23, 24), (23, 36), (25, 26), (25, 37), (26, 27), (26, 28), (26, 29),
    (28, 29), (29, 38),
];

pub const IEEE39_BUS_COUNT: u32 = 39;

/// Breadth-first hop distances from `source` to every reachable bus.
pub fn hop_distances(source: BusId) -> HashMap<BusId, usize> {
    let mut adjacency: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(a, b) in IEEE39_BRANCHES {
        adjacency.entry(a).or_default().push(b);
        adjacency.entry(b).or_default().push(a);
    }

    let mut dist = HashMap::new();
    let mut queue = VecDeque::new();
    dist.insert(source, 0);
    queue.push_back(source.0);
    while let Some(u) = queue.pop_front() {
        let du = dist[&BusId(u)];
        for &v in adjacency.get(&u).into_iter().flatten() {
            dist.entry(BusId(v)).or_insert_with(|| {
                queue.push_back(v);
                du + 1
            });
        }
    }
    dist
}

pub fn is_ieee39_bus(bus: BusId) -> bool {
    (1..=IEEE39_BUS_COUNT).contains(&bus.0)
}
