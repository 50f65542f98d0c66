//! Anchor proposal: score OCR tokens, pick anchors, and build the group of
//! related tokens around each anchor under one of three strategies. Also the
//! reference-mining rules that recover training targets from captions alone.

use backbone::{concat_cols, concat_rows, linear, AttnMask, Session, Val};
use serde::{Deserialize, Serialize};

use crate::model::{GraphStrategy, Model};
use crate::scene::Scene;
use crate::vocab::tokenize;

/// Anchor score distribution over token slots: softmax over real tokens only,
/// exact zeros at padded slots. 1 x m_tokens.
pub fn anchor_scores<'g>(sess: &Session<'g>, t: Val<'g>, t_real: &[bool]) -> Val<'g> {
    let w = sess.param("anchor.w");
    let b = sess.param("anchor.b");
    linear(t, w, b).transpose().masked_softmax_rows(t_real)
}

/// Top-k real token indices by score, descending, ties to the lower index.
/// k is clamped to the number of real tokens.
pub fn select_anchors(probs: &[f64], t_real: &[bool], k: usize) -> Vec<usize> {
    let mut idxs: Vec<usize> =
        (0..probs.len()).filter(|&i| t_real.get(i).copied().unwrap_or(false)).collect();
    idxs.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idxs.truncate(k);
    idxs
}

/// Output of one group-builder pass, aligned with `real_idxs`: row r of
/// `logits` and `updated` describes token `real_idxs[r]`.
pub struct GraphBuild<'g> {
    pub real_idxs: Vec<usize>,
    /// Membership logits, R x 1.
    pub logits: Val<'g>,
    /// Strategy-updated token embeddings, R x d.
    pub updated: Val<'g>,
}

/// Scan order for the recurrent builder: confidence descending, ties to the
/// lower token index.
pub fn confidence_order(real_idxs: &[usize], conf: &[f64]) -> Vec<usize> {
    let mut order = real_idxs.to_vec();
    order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Build the group structure around `anchor` (a real token index) from fused
/// token rows `t`. `conf` gives per-slot detection confidence for the scan
/// order of the recurrent strategy.
pub fn build_graph<'g>(
    model: &Model,
    sess: &Session<'g>,
    t: Val<'g>,
    t_real: &[bool],
    anchor: usize,
    conf: &[f64],
) -> GraphBuild<'g> {
    assert!(t_real[anchor], "anchor {anchor} is not a real token");
    let real_idxs: Vec<usize> = (0..t_real.len()).filter(|&i| t_real[i]).collect();
    let r = real_idxs.len();

    match model.config.strategy {
        GraphStrategy::Sequence => {
            let order = confidence_order(&real_idxs, conf);
            let xs = t.gather_rows(&order);
            let h0 = t.slice_rows(anchor, anchor + 1);
            let gru = model.acg_gru.as_ref().expect("sequence strategy has a recurrent cell");
            let states = gru.scan(sess, xs, h0);
            // map scan-ordered states back to ascending token order
            let back: Vec<usize> = real_idxs
                .iter()
                .map(|i| order.iter().position(|o| o == i).expect("token in scan order"))
                .collect();
            let updated = states.gather_rows(&back);
            let logits = linear(updated, sess.param("acg.f3.w"), sess.param("acg.f3.b"));
            GraphBuild { real_idxs, logits, updated }
        }
        GraphStrategy::Independent => {
            let rows = t.gather_rows(&real_idxs);
            let anchor_tiled = t.gather_rows(&vec![anchor; r]);
            let feats = concat_cols(&[rows, anchor_tiled]);
            let logits = linear(feats, sess.param("acg.ind.w"), sess.param("acg.ind.b"));
            GraphBuild { real_idxs, logits, updated: rows }
        }
        GraphStrategy::Multiple => {
            let seq = concat_rows(&[t.slice_rows(anchor, anchor + 1), t.gather_rows(&real_idxs)]);
            let attn = model.acg_attn.as_ref().expect("multiple strategy has an attention stack");
            let out = attn.forward(sess, seq, &AttnMask::full(1 + r), None);
            let updated = out.slice_rows(1, 1 + r);
            let logits = linear(updated, sess.param("acg.f3.w"), sess.param("acg.f3.b"));
            GraphBuild { real_idxs, logits, updated }
        }
    }
}

/// A concrete anchor-plus-members group, in token-index space.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGraph {
    pub anchor: usize,
    /// Member token indices, ascending, anchor excluded.
    pub members: Vec<usize>,
    /// (token index, membership score) for every real token.
    pub scores: Vec<(usize, f64)>,
}

/// Threshold the builder's membership scores. The anchor itself is always part
/// of the group and never listed as a member.
pub fn assemble_graph(
    real_idxs: &[usize],
    member_scores: &[f64],
    anchor: usize,
    threshold: f64,
) -> AnchorGraph {
    assert_eq!(real_idxs.len(), member_scores.len());
    let mut members = Vec::new();
    let mut scores = Vec::new();
    for (r, &idx) in real_idxs.iter().enumerate() {
        scores.push((idx, member_scores[r]));
        if idx != anchor && member_scores[r] > threshold {
            members.push(idx);
        }
    }
    AnchorGraph { anchor, members, scores }
}

/// Rows for the text captioner's context: the anchor's fused embedding first,
/// then the updated embeddings of each member, ascending by token index.
pub fn graph_embedding<'g>(t: Val<'g>, build: &GraphBuild<'g>, graph: &AnchorGraph) -> Val<'g> {
    let mut parts = vec![t.slice_rows(graph.anchor, graph.anchor + 1)];
    if !graph.members.is_empty() {
        let rows: Vec<usize> = graph
            .members
            .iter()
            .map(|m| build.real_idxs.iter().position(|i| i == m).expect("member is a real token"))
            .collect();
        parts.push(build.updated.gather_rows(&rows));
    }
    concat_rows(&parts)
}

/// Token texts mapped to the scene's OCR slots that the text captioner can
/// copy from: anchor first, then members, mirroring `graph_embedding` rows.
pub fn graph_slot_tokens(graph: &AnchorGraph) -> Vec<usize> {
    let mut slots = vec![graph.anchor];
    slots.extend_from_slice(&graph.members);
    slots
}

/// Hand-written anchor choices for the rule-based baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRule {
    /// Largest box area; ties to the lower slot.
    Large,
    /// Box centre nearest the image centre; ties to the lower slot.
    Centre,
    /// The mined anchor.
    Gt,
}

impl AnchorRule {
    pub fn parse(s: &str) -> Option<AnchorRule> {
        match s {
            "large" => Some(AnchorRule::Large),
            "centre" | "center" => Some(AnchorRule::Centre),
            "gt" => Some(AnchorRule::Gt),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnchorRule::Large => "large",
            AnchorRule::Centre => "centre",
            AnchorRule::Gt => "gt",
        }
    }
}

/// Hand-written grouping choices for the rule-based baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRule {
    All,
    /// The `k` tokens nearest the anchor by box-centre distance.
    Around,
    /// A seeded uniform sample of `k` other tokens.
    Random,
}

impl GroupRule {
    pub fn parse(s: &str) -> Option<GroupRule> {
        match s {
            "all" => Some(GroupRule::All),
            "around" => Some(GroupRule::Around),
            "random" => Some(GroupRule::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupRule::All => "all",
            GroupRule::Around => "around",
            GroupRule::Random => "random",
        }
    }
}

fn scene_hash(id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Build a group by rule instead of by the learned builder. Member scores are
/// 1 for chosen members and 0 otherwise.
pub fn rule_based_acg(
    scene: &Scene,
    anchor_rule: AnchorRule,
    group_rule: GroupRule,
    k_around: usize,
    seed: u64,
) -> Result<AnchorGraph, String> {
    let m = scene.ocr.len();
    if m == 0 {
        return Err(format!("scene {}: no tokens to anchor on", scene.id));
    }
    let centres: Vec<(f64, f64)> =
        scene.ocr.iter().map(|t| crate::scene::bbox_centre(&t.bbox)).collect();

    let anchor = match anchor_rule {
        AnchorRule::Large => (0..m)
            .max_by(|&a, &b| {
                let (aa, ab) =
                    (crate::scene::bbox_area(&scene.ocr[a].bbox), crate::scene::bbox_area(&scene.ocr[b].bbox));
                aa.partial_cmp(&ab).unwrap().then(b.cmp(&a))
            })
            .expect("nonempty"),
        AnchorRule::Centre => (0..m)
            .min_by(|&a, &b| {
                let da = (centres[a].0 - 0.5).powi(2) + (centres[a].1 - 0.5).powi(2);
                let db = (centres[b].0 - 0.5).powi(2) + (centres[b].1 - 0.5).powi(2);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .expect("nonempty"),
        AnchorRule::Gt => mine_graph(scene)
            .anchor
            .ok_or_else(|| format!("scene {}: no minable anchor", scene.id))?,
    };

    let others: Vec<usize> = (0..m).filter(|&i| i != anchor).collect();
    let members: Vec<usize> = match group_rule {
        GroupRule::All => others,
        GroupRule::Around => {
            let mut by_dist = others;
            by_dist.sort_by(|&a, &b| {
                let da = (centres[a].0 - centres[anchor].0).powi(2)
                    + (centres[a].1 - centres[anchor].1).powi(2);
                let db = (centres[b].0 - centres[anchor].0).powi(2)
                    + (centres[b].1 - centres[anchor].1).powi(2);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            by_dist.truncate(k_around);
            by_dist.sort_unstable();
            by_dist
        }
        GroupRule::Random => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                seed ^ scene_hash(&scene.id) ^ (anchor as u64).wrapping_mul(0x9E3779B97F4A7C15),
            );
            let mut pool = others;
            let take = k_around.min(pool.len());
            for i in 0..take {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(take);
            pool.sort_unstable();
            pool
        }
    };

    let scores = (0..m)
        .map(|i| (i, if i == anchor || members.contains(&i) { 1.0 } else { 0.0 }))
        .collect();
    Ok(AnchorGraph { anchor, members, scores })
}

/// Mining result over one scene's references.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinedGraph {
    /// Token mentioned by the most references; None when no reference mentions
    /// any token.
    pub anchor: Option<usize>,
    /// Per OCR slot: does the slot belong to the anchor's group (anchor
    /// included)? All false when anchor is None.
    pub in_graph: Vec<bool>,
    /// Per OCR slot: number of references mentioning it.
    pub mention_counts: Vec<usize>,
}

fn contains_span(words: &[String], span: &[String]) -> bool {
    if span.is_empty() || span.len() > words.len() {
        return false;
    }
    (0..=words.len() - span.len()).any(|p| &words[p..p + span.len()] == span)
}

/// Recover anchor and group targets from references: the anchor is the token
/// mentioned by the most references (ties to the lower slot); the group is
/// every token co-mentioned with the anchor in at least one reference.
pub fn mine_graph(scene: &Scene) -> MinedGraph {
    let m = scene.ocr.len();
    let ocr_tok: Vec<Vec<String>> = scene.ocr.iter().map(|t| tokenize(&t.text)).collect();
    let mut contains = vec![vec![false; m]; scene.refs.len()];
    for (ri, r) in scene.refs.iter().enumerate() {
        let words = tokenize(r);
        for (k, toks) in ocr_tok.iter().enumerate() {
            contains[ri][k] = contains_span(&words, toks);
        }
    }
    let mut mention_counts = vec![0usize; m];
    for row in &contains {
        for (k, &c) in row.iter().enumerate() {
            if c {
                mention_counts[k] += 1;
            }
        }
    }
    let anchor = mention_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k);
    let mut in_graph = vec![false; m];
    if let Some(a) = anchor {
        for row in &contains {
            if row[a] {
                for (k, &c) in row.iter().enumerate() {
                    if c {
                        in_graph[k] = true;
                    }
                }
            }
        }
        in_graph[a] = true;
    }
    MinedGraph { anchor, in_graph, mention_counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::scene::{OcrToken, Scene, VisualObject};
    use crate::vocab::Vocabulary;
    use backbone::{Graph, Tensor};

    fn scene_with(ocr_texts: &[&str], refs: &[&str]) -> Scene {
        Scene {
            id: "s".into(),
            objects: vec![VisualObject { app: vec![0.0; 6], bbox: vec![0.1, 0.1, 0.2, 0.2] }],
            ocr: ocr_texts
                .iter()
                .map(|t| OcrToken {
                    text: t.to_string(),
                    app: vec![0.0; 6],
                    bbox: vec![0.1, 0.1, 0.2, 0.2],
                    word_emb: vec![0.0; 4],
                    char_emb: vec![0.0; 4],
                    conf: 0.5,
                })
                .collect(),
            refs: refs.iter().map(|r| r.to_string()).collect(),
        }
    }

    #[test]
    fn mining_counts_each_reference_once() {
        // "stop stop stop" mentions 'stop' once for counting purposes
        let scene = scene_with(
            &["stop", "exit"],
            &["stop stop stop", "an exit and exit sign", "exit here"],
        );
        let mined = mine_graph(&scene);
        assert_eq!(mined.mention_counts, vec![1, 2]);
        assert_eq!(mined.anchor, Some(1));
    }

    #[test]
    fn mining_breaks_ties_toward_lower_slot() {
        let scene = scene_with(&["alpha", "beta"], &["alpha and beta"]);
        let mined = mine_graph(&scene);
        assert_eq!(mined.mention_counts, vec![1, 1]);
        assert_eq!(mined.anchor, Some(0));
        assert_eq!(mined.in_graph, vec![true, true]);
    }

    #[test]
    fn mining_group_requires_co_mention_with_anchor() {
        let scene = scene_with(
            &["stop", "exit", "menu"],
            &["the stop sign", "a stop and exit sign", "just a menu"],
        );
        let mined = mine_graph(&scene);
        assert_eq!(mined.anchor, Some(0));
        // exit co-occurs with stop; menu never does
        assert_eq!(mined.in_graph, vec![true, true, false]);
    }

    #[test]
    fn mining_without_mentions_yields_no_anchor() {
        let scene = scene_with(&["stop"], &["a plain wall", "nothing written"]);
        let mined = mine_graph(&scene);
        assert_eq!(mined.anchor, None);
        assert_eq!(mined.in_graph, vec![false]);
    }

    #[test]
    fn mining_matches_multiword_tokens_contiguously() {
        let scene = scene_with(&["bus stop"], &["near the bus stop", "the bus will stop"]);
        let mined = mine_graph(&scene);
        // second ref has "bus ... stop" but not contiguous
        assert_eq!(mined.mention_counts, vec![1]);
        assert_eq!(mined.anchor, Some(0));
    }

    #[test]
    fn selection_orders_by_score_then_index() {
        let probs = [0.2, 0.5, 0.2, 0.1];
        let real = [true, true, true, true];
        assert_eq!(select_anchors(&probs, &real, 3), vec![1, 0, 2]);
        assert_eq!(select_anchors(&probs, &real, 10), vec![1, 0, 2, 3]);
        let real2 = [true, false, true, true];
        assert_eq!(select_anchors(&probs, &real2, 2), vec![0, 2]);
    }

    fn tiny_model(strategy: GraphStrategy) -> Model {
        let cfg = ModelConfig { strategy, ..ModelConfig::tiny() };
        Model::init(cfg, Vocabulary::build(["a b"], 1), 5).unwrap()
    }

    fn fused_tokens(model: &Model, seed: u64) -> Tensor {
        // synthetic fused rows standing in for the fusion stage output
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(model.config.m_tokens, model.config.d);
        for r in 0..2 {
            for c in 0..model.config.d {
                *t.at_mut(r, c) = rng.gen_range(-1.0..1.0);
            }
        }
        t
    }

    #[test]
    fn anchor_scores_are_masked_probabilities() {
        let model = tiny_model(GraphStrategy::Sequence);
        let g = Graph::new();
        let sess = Session::new(&g, &model.store);
        let t = sess.constant(fused_tokens(&model, 2));
        let real = [true, true, false];
        let probs = anchor_scores(&sess, t, &real).value();
        assert_eq!(probs.shape(), (1, 3));
        assert_eq!(probs.at(0, 2), 0.0, "padded slot must carry exactly zero score");
        let sum: f64 = probs.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn builders_produce_aligned_rows_for_every_strategy() {
        for strategy in [GraphStrategy::Sequence, GraphStrategy::Independent, GraphStrategy::Multiple] {
            let model = tiny_model(strategy);
            let g = Graph::new();
            let sess = Session::new(&g, &model.store);
            let t = sess.constant(fused_tokens(&model, 3));
            let real = [true, true, false];
            let conf = [0.2, 0.9, 0.0];
            let build = build_graph(&model, &sess, t, &real, 1, &conf);
            assert_eq!(build.real_idxs, vec![0, 1], "{strategy:?}");
            assert_eq!(build.logits.shape(), (2, 1), "{strategy:?}");
            assert_eq!(build.updated.shape(), (2, model.config.d), "{strategy:?}");
        }
    }

    #[test]
    fn independent_strategy_leaves_embeddings_unchanged() {
        let model = tiny_model(GraphStrategy::Independent);
        let g = Graph::new();
        let sess = Session::new(&g, &model.store);
        let raw = fused_tokens(&model, 4);
        let t = sess.constant(raw.clone());
        let build = build_graph(&model, &sess, t, &[true, true, false], 0, &[0.5, 0.5, 0.0]);
        let updated = build.updated.value();
        for r in 0..2 {
            for c in 0..model.config.d {
                assert_eq!(updated.at(r, c), raw.at(r, c));
            }
        }
    }

    #[test]
    fn sequence_strategy_scans_in_confidence_order() {
        // swapping confidences reorders the scan and must change the states
        let model = tiny_model(GraphStrategy::Sequence);
        let g = Graph::new();
        let sess = Session::new(&g, &model.store);
        let t = sess.constant(fused_tokens(&model, 6));
        let real = [true, true, false];
        let a = build_graph(&model, &sess, t, &real, 0, &[0.9, 0.1, 0.0]).updated.value();
        let b = build_graph(&model, &sess, t, &real, 0, &[0.1, 0.9, 0.0]).updated.value();
        assert_ne!(a.data, b.data, "scan order had no effect");
        assert_eq!(confidence_order(&[0, 1, 2], &[0.5, 0.5, 0.9]), vec![2, 0, 1]);
    }

    #[test]
    fn assembly_thresholds_and_excludes_anchor() {
        let graph = assemble_graph(&[0, 1, 2], &[0.9, 0.4, 0.7], 0, 0.5);
        assert_eq!(graph.anchor, 0);
        assert_eq!(graph.members, vec![2], "anchor excluded, sub-threshold excluded");
        assert_eq!(graph.scores.len(), 3);
        assert_eq!(graph_slot_tokens(&graph), vec![0, 2]);
    }

    fn scene_with_boxes(boxes: &[[f64; 4]]) -> Scene {
        let mut s = scene_with(&vec!["w"; boxes.len()], &[]);
        for (i, b) in boxes.iter().enumerate() {
            s.ocr[i].bbox = b.to_vec();
            s.ocr[i].text = format!("w{i}");
        }
        s
    }

    #[test]
    fn large_rule_picks_biggest_box() {
        // areas 0.01, 0.09, 0.04
        let s = scene_with_boxes(&[
            [0.0, 0.0, 0.1, 0.1],
            [0.0, 0.0, 0.3, 0.3],
            [0.0, 0.0, 0.2, 0.2],
        ]);
        let g = rule_based_acg(&s, AnchorRule::Large, GroupRule::All, 5, 0).unwrap();
        assert_eq!(g.anchor, 1);
        assert_eq!(g.members, vec![0, 2]);
        // tie: equal areas -> lower slot
        let t = scene_with_boxes(&[[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7]]);
        assert_eq!(rule_based_acg(&t, AnchorRule::Large, GroupRule::All, 5, 0).unwrap().anchor, 0);
    }

    #[test]
    fn centre_rule_picks_nearest_to_image_centre() {
        let s = scene_with_boxes(&[
            [0.0, 0.0, 0.1, 0.1],   // centre (0.05, 0.05)
            [0.45, 0.45, 0.55, 0.55], // centre (0.5, 0.5)
            [0.7, 0.7, 0.9, 0.9],
        ]);
        let g = rule_based_acg(&s, AnchorRule::Centre, GroupRule::All, 5, 0).unwrap();
        assert_eq!(g.anchor, 1);
    }

    #[test]
    fn around_rule_takes_nearest_and_matches_all_at_limit() {
        let s = scene_with_boxes(&[
            [0.0, 0.0, 0.1, 0.1],
            [0.05, 0.0, 0.15, 0.1],
            [0.4, 0.4, 0.5, 0.5],
            [0.8, 0.8, 0.9, 0.9],
        ]);
        let near = rule_based_acg(&s, AnchorRule::Large, GroupRule::Around, 1, 0).unwrap();
        // all areas equal -> anchor 0; nearest other is slot 1
        assert_eq!(near.anchor, 0);
        assert_eq!(near.members, vec![1]);
        let all = rule_based_acg(&s, AnchorRule::Large, GroupRule::All, 0, 0).unwrap();
        let wide = rule_based_acg(&s, AnchorRule::Large, GroupRule::Around, 3, 0).unwrap();
        assert_eq!(wide.members, all.members, "k >= M-1 reduces to the all rule");
    }

    #[test]
    fn random_rule_is_seeded_and_sized() {
        let s = scene_with_boxes(&[
            [0.0, 0.0, 0.1, 0.1],
            [0.2, 0.2, 0.3, 0.3],
            [0.4, 0.4, 0.5, 0.5],
            [0.6, 0.6, 0.7, 0.7],
        ]);
        let a = rule_based_acg(&s, AnchorRule::Large, GroupRule::Random, 2, 9).unwrap();
        let b = rule_based_acg(&s, AnchorRule::Large, GroupRule::Random, 2, 9).unwrap();
        assert_eq!(a, b, "same seed must reproduce the sample");
        assert_eq!(a.members.len(), 2);
        assert!(!a.members.contains(&a.anchor));
        let c = rule_based_acg(&s, AnchorRule::Large, GroupRule::Random, 10, 9).unwrap();
        assert_eq!(c.members.len(), 3, "sample clamps to available tokens");
    }

    #[test]
    fn gt_rule_uses_mining_and_reports_failures() {
        let s = scene_with(&["stop", "exit"], &["a stop sign", "stop here"]);
        let g = rule_based_acg(&s, AnchorRule::Gt, GroupRule::All, 5, 0).unwrap();
        assert_eq!(g.anchor, 0);
        let bare = scene_with(&["stop"], &["no text mentioned"]);
        assert!(rule_based_acg(&bare, AnchorRule::Gt, GroupRule::All, 5, 0).is_err());
        let empty = scene_with(&[], &["anything"]);
        assert!(rule_based_acg(&empty, AnchorRule::Large, GroupRule::All, 5, 0).is_err());
    }

    #[test]
    fn graph_embedding_stacks_anchor_then_members() {
        let model = tiny_model(GraphStrategy::Independent);
        let g = Graph::new();
        let sess = Session::new(&g, &model.store);
        let raw = fused_tokens(&model, 8);
        let t = sess.constant(raw.clone());
        let real = [true, true, true];
        let build = build_graph(&model, &sess, t, &real, 1, &[0.5; 3]);
        let graph = assemble_graph(&build.real_idxs, &[0.9, 0.9, 0.9], 1, 0.5);
        assert_eq!(graph.members, vec![0, 2]);
        let emb = graph_embedding(t, &build, &graph).value();
        assert_eq!(emb.shape(), (3, model.config.d));
        for c in 0..model.config.d {
            assert_eq!(emb.at(0, c), raw.at(1, c), "row 0 is the anchor's fused embedding");
            assert_eq!(emb.at(1, c), raw.at(0, c));
            assert_eq!(emb.at(2, c), raw.at(2, c));
        }
    }
}
