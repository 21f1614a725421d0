use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::jsonl::read_jsonl;
use crate::error::Result;

/// One comment from a forum dump (Pushshift-style field names).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadComment {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub body: String,
    pub subreddit: String,
    pub created_utc: i64,
}

impl ThreadComment {
    /// Parent id with any `t1_` fullname prefix removed.
    fn parent_key(&self) -> Option<&str> {
        self.parent_id
            .as_deref()
            .map(|p| p.strip_prefix("t1_").unwrap_or(p))
    }
}

/// A tree of comments. `comments[0]` is the root; the rest follow in
/// breadth-first order with siblings sorted by `(created_utc, id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thread {
    pub comments: Vec<ThreadComment>,
    /// Index of each comment's parent within `comments`.
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
}

impl Thread {
    pub fn root_id(&self) -> &str {
        &self.comments[0].id
    }

    pub fn subreddit(&self) -> &str {
        &self.comments[0].subreddit
    }

    pub fn len(&self) -> usize {
        self.comments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comments.is_empty()
    }

    /// Number of comments on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.len()];
        let mut best = 0;
        for i in 0..self.len() {
            depth[i] = match self.parent[i] {
                Some(p) => depth[p] + 1,
                None => 1,
            };
            best = best.max(depth[i]);
        }
        best
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThreadDump {
    pub threads: Vec<Thread>,
    /// Comments whose parent was missing from the dump and became roots.
    pub orphans_promoted: usize,
    /// Comments promoted to root to break a parent cycle.
    pub cycles_broken: usize,
    pub duplicate_ids: usize,
}

impl ThreadDump {
    pub fn comment_count(&self) -> usize {
        self.threads.iter().map(Thread::len).sum()
    }
}

pub fn load_thread_dump(path: &Path) -> Result<ThreadDump> {
    let comments: Vec<ThreadComment> = read_jsonl(path)?;
    Ok(group_threads(comments))
}

/// Groups comments into threads. The result does not depend on input order:
/// threads are sorted by root id and siblings by `(created_utc, id)`.
pub fn group_threads(comments: Vec<ThreadComment>) -> ThreadDump {
    let mut dump = ThreadDump::default();

    let mut by_id: BTreeMap<String, ThreadComment> = BTreeMap::new();
    for c in comments {
        match by_id.get(&c.id) {
            // keep the smallest representation so duplicates resolve order-independently
            Some(existing)
                if (existing.created_utc, &existing.body) <= (c.created_utc, &c.body) =>
            {
                dump.duplicate_ids += 1;
            }
            Some(_) => {
                dump.duplicate_ids += 1;
                by_id.insert(c.id.clone(), c);
            }
            None => {
                by_id.insert(c.id.clone(), c);
            }
        }
    }

    let ids: Vec<&String> = by_id.keys().collect();
    let index: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let comments: Vec<&ThreadComment> = by_id.values().collect();
    let n = comments.len();

    let mut parent: Vec<Option<usize>> = vec![None; n];
    for (i, c) in comments.iter().enumerate() {
        if let Some(key) = c.parent_key() {
            match index.get(key) {
                Some(&p) if p != i => parent[i] = Some(p),
                Some(_) => dump.cycles_broken += 1,
                None => dump.orphans_promoted += 1,
            }
        }
    }

    let sort_key = |i: usize| (comments[i].created_utc, comments[i].id.as_str());
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(p) = parent[i] {
            children[p].push(i);
        }
    }
    for ch in &mut children {
        ch.sort_by_key(|&i| sort_key(i));
    }

    let mut assigned = vec![false; n];
    let mut roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
    let mut threads = Vec::new();
    loop {
        for &root in &roots {
            threads.push(collect_tree(root, &comments, &children, &mut assigned));
        }
        // whatever is left sits on a parent cycle; promote the smallest id
        match (0..n).find(|&i| !assigned[i]) {
            Some(i) => {
                let mut cur = i;
                let mut seen = vec![false; n];
                while !seen[cur] {
                    seen[cur] = true;
                    cur = parent[cur].expect("unassigned comment must have a parent");
                }
                let cycle_start = cur;
                let mut smallest = cycle_start;
                let mut c = parent[cycle_start].unwrap();
                while c != cycle_start {
                    smallest = smallest.min(c);
                    c = parent[c].unwrap();
                }
                if let Some(p) = parent[smallest].take() {
                    children[p].retain(|&x| x != smallest);
                }
                dump.cycles_broken += 1;
                roots = vec![smallest];
            }
            None => break,
        }
    }
    threads.sort_by(|a, b| a.root_id().cmp(b.root_id()));
    dump.threads = threads;
    dump
}

fn collect_tree(
    root: usize,
    comments: &[&ThreadComment],
    children: &[Vec<usize>],
    assigned: &mut [bool],
) -> Thread {
    let mut order = Vec::new();
    let mut local_parent = Vec::new();
    let mut queue = VecDeque::from([(root, None)]);
    while let Some((i, p)) = queue.pop_front() {
        assigned[i] = true;
        let local = order.len();
        order.push(i);
        local_parent.push(p);
        for &c in &children[i] {
            queue.push_back((c, Some(local)));
        }
    }
    let mut local_children = vec![Vec::new(); order.len()];
    for (i, p) in local_parent.iter().enumerate() {
        if let Some(p) = p {
            local_children[*p].push(i);
        }
    }
    Thread {
        comments: order.iter().map(|&i| comments[i].clone()).collect(),
        parent: local_parent,
        children: local_children,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(id: &str, parent: Option<&str>, t: i64) -> ThreadComment {
        ThreadComment {
            id: id.into(),
            parent_id: parent.map(str::to_string),
            body: format!("comment {id}"),
            subreddit: "taxi".into(),
            created_utc: t,
        }
    }

    #[test]
    fn chain_is_one_thread_of_depth_three() {
        let dump = group_threads(vec![
            c("a", None, 1),
            c("b", Some("a"), 2),
            c("c", Some("b"), 3),
        ]);
        assert_eq!(dump.threads.len(), 1);
        assert_eq!(dump.threads[0].depth(), 3);
        assert_eq!(dump.threads[0].root_id(), "a");
        assert!(dump.threads.iter().all(|t| t.subreddit() == "taxi"));
    }

    #[test]
    fn orphan_becomes_root_and_is_counted() {
        let dump = group_threads(vec![c("a", None, 1), c("x", Some("t3_gone"), 2)]);
        assert_eq!(dump.threads.len(), 2);
        assert_eq!(dump.orphans_promoted, 1);
    }

    #[test]
    fn fullname_prefix_is_stripped() {
        let dump = group_threads(vec![c("a", None, 1), c("b", Some("t1_a"), 2)]);
        assert_eq!(dump.threads.len(), 1);
        assert_eq!(dump.orphans_promoted, 0);
    }

    #[test]
    fn cycle_is_broken() {
        let dump = group_threads(vec![c("a", Some("b"), 1), c("b", Some("a"), 2)]);
        assert_eq!(dump.threads.len(), 1);
        assert_eq!(dump.threads[0].root_id(), "a");
        assert_eq!(dump.cycles_broken, 1);
        assert_eq!(dump.comment_count(), 2);
    }

    fn forest() -> impl Strategy<Value = Vec<ThreadComment>> {
        (1usize..30).prop_flat_map(|n| {
            proptest::collection::vec((0usize..=n, 0i64..5), n).prop_map(move |spec| {
                spec.iter()
                    .enumerate()
                    .map(|(i, &(p, t))| {
                        // parent index strictly smaller keeps it acyclic; p >= i means root
                        let parent = if p < i { Some(format!("c{p}")) } else { None };
                        c(&format!("c{i}"), parent.as_deref(), t)
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn grouping_ignores_line_order(comments in forest(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = comments.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = group_threads(comments.clone());
            let b = group_threads(shuffled);
            prop_assert_eq!(&a, &b);
            // every comment reachable from exactly one root
            prop_assert_eq!(a.comment_count(), comments.len());
            let mut ids: Vec<_> = a.threads.iter().flat_map(|t| t.comments.iter().map(|c| c.id.clone())).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), comments.len());
        }
    }
}
