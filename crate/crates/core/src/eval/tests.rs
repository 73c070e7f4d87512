use super::*;
use crate::corpus::{LabelSet, Span, Split};
use crate::graph::Matrix;
use crate::model::{ModelConfig, PositiveWeight, Preset};
use crate::tokenizer::Vocabulary;
use proptest::prelude::*;

/// Counts TP/FP/FN straight from the pairs, one class at a time.
fn brute_force(n: usize, gold: &[usize], pred: &[usize]) -> (f64, f64) {
    let (mut tp_all, mut fp_all, mut fn_all) = (0u64, 0u64, 0u64);
    let mut f1s = Vec::new();
    for c in 0..n {
        let tp = gold.iter().zip(pred).filter(|(&g, &p)| g == c && p == c).count() as u64;
        let fp = gold.iter().zip(pred).filter(|(&g, &p)| g != c && p == c).count() as u64;
        let fn_ = gold.iter().zip(pred).filter(|(&g, &p)| g == c && p != c).count() as u64;
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        let d = 2 * tp + fp + fn_;
        f1s.push(if d == 0 { 0.0 } else { (2 * tp) as f64 / d as f64 });
    }
    let d = 2 * tp_all + fp_all + fn_all;
    let micro = if d == 0 { 0.0 } else { (2 * tp_all) as f64 / d as f64 };
    (micro, f1s.iter().sum::<f64>() / n as f64)
}

#[test]
fn worked_example() {
    let counts = ConfusionCounts::from_counts(vec![2, 1], vec![1, 0], vec![0, 1]).unwrap();
    assert_eq!(micro_f1(&counts), 0.75);
    let per_class = per_class_f1(&counts);
    assert!((per_class[0] - 0.8).abs() < 1e-12);
    assert!((per_class[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!((macro_f1(&counts) - 0.7333).abs() < 1e-4);
    assert!(ConfusionCounts::from_counts(vec![1], vec![], vec![1]).is_err());
}

#[test]
fn degenerate_counts() {
    let zero = ConfusionCounts::new(3);
    assert_eq!(micro_f1(&zero), 0.0);
    assert_eq!(macro_f1(&zero), 0.0);
    let perfect = ConfusionCounts::from_pairs(3, &[0, 1, 2, 2], &[0, 1, 2, 2]);
    assert_eq!(micro_f1(&perfect), 1.0);
    assert_eq!(macro_f1(&perfect), 1.0);
    // class 2 is neither gold nor predicted and contributes 0
    let absent = ConfusionCounts::from_pairs(3, &[0, 1], &[0, 1]);
    assert_eq!(per_class_f1(&absent), vec![1.0, 1.0, 0.0]);
    assert!((macro_f1(&absent) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn majority_predictor_on_balanced_set() {
    let gold = [0, 1, 0, 1, 0, 1];
    let counts = ConfusionCounts::from_pairs(2, &gold, &[0; 6]);
    assert_eq!(micro_f1(&counts), 0.5);
}

proptest! {
    #[test]
    fn metrics_match_brute_force(
        n in 1usize..=3,
        pairs in prop::collection::vec((0usize..3, 0usize..3), 0..=15),
    ) {
        let gold: Vec<usize> = pairs.iter().map(|p| p.0 % n).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % n).collect();
        let counts = ConfusionCounts::from_pairs(n, &gold, &pred);
        let (micro, macro_) = brute_force(n, &gold, &pred);
        prop_assert_eq!(micro_f1(&counts), micro);
        prop_assert_eq!(macro_f1(&counts), macro_);
        prop_assert_eq!(counts.total_predictions(), pred.len() as u64);
        prop_assert_eq!(counts.total_gold(), gold.len() as u64);
    }

    #[test]
    fn macro_is_invariant_to_relabeling(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..=15)) {
        let perm = [2usize, 0, 1];
        let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = ConfusionCounts::from_pairs(3, &gold, &pred);
        let b = ConfusionCounts::from_pairs(
            3,
            &gold.iter().map(|&g| perm[g]).collect::<Vec<_>>(),
            &pred.iter().map(|&p| perm[p]).collect::<Vec<_>>(),
        );
        prop_assert!((macro_f1(&a) - macro_f1(&b)).abs() < 1e-12);
        prop_assert_eq!(micro_f1(&a), micro_f1(&b));
    }
}

fn set(items: &[usize]) -> BTreeSet<usize> {
    items.iter().copied().collect()
}

#[test]
fn set_agreement_cases() {
    assert_eq!(set_agreement(&set(&[1, 2]), &set(&[1, 2])).f1, 1.0);
    assert_eq!(set_agreement(&set(&[1]), &set(&[2])).f1, 0.0);
    let a = set_agreement(&set(&[1, 2, 3]), &set(&[2, 3, 4]));
    assert!((a.precision - 2.0 / 3.0).abs() < 1e-12);
    assert!((a.recall - 2.0 / 3.0).abs() < 1e-12);
    assert!((a.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(set_agreement(&set(&[]), &set(&[])).f1, 1.0);
    assert_eq!(set_agreement(&set(&[]), &set(&[1])).f1, 0.0);
    assert_eq!(set_agreement(&set(&[1]), &set(&[])).f1, 0.0);
}

#[test]
fn selection_rules() {
    let scores = [0.2, 0.9, 0.5, 0.9, 0.1];
    assert_eq!(select_salient(&scores, Selection::Threshold(0.5)), set(&[1, 2, 3]));
    assert_eq!(select_salient(&scores, Selection::TopK(2)), set(&[1, 3]));
    assert_eq!(select_salient(&[0.3, 0.3, 0.3], Selection::TopK(1)), set(&[0]));
    assert_eq!(select_salient(&scores, Selection::TopK(0)), set(&[]));
    let attribution = TokenAttribution {
        doc_id: "d".into(),
        method: AttributionMethod::Occlusion,
        scores: scores.to_vec(),
    };
    let gold = SaliencyMask::new(5, [1, 2]).unwrap();
    assert_eq!(saliency_agreement(&attribution, &gold, Selection::TopK(2)).f1, 0.5);
}

#[test]
fn rationale_tokens_follow_spans() {
    let doc = Document::new("d", "the late goal won", Some(0), Some(vec![Span::new(9, 13)])).unwrap();
    let vocab = Vocabulary::build(["the late goal won"], 50, 1);
    let encoding = vocab.encode(&doc.text, 16);
    let mask = rationale_mask(&doc, &encoding).unwrap();
    assert_eq!(mask.indices().collect::<Vec<_>>(), vec![3]);
    let bare = Document::new("e", "the late goal", Some(0), None).unwrap();
    assert!(matches!(
        rationale_mask(&bare, &encoding),
        Err(EvalError::NoGoldRationale(_))
    ));
}

/// `logit_0 = Σ_i value[id_i]·weight[i]`, `logit_1 = 0`, with scalar embeddings.
struct PositionLinear {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl Attributable for PositionLinear {
    fn class_probabilities(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let z: f64 = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| self.values[id as usize] * self.weights[i])
            .sum();
        Ok(crate::model::softmax(&[z, 0.0]))
    }

    fn embedding_gradient(&self, ids: &[u32], class: usize) -> Result<(Matrix, Matrix)> {
        let emb = Matrix::column(ids.iter().map(|&id| self.values[id as usize]).collect());
        let grad = Matrix::column(
            (0..ids.len())
                .map(|i| if class == 0 { self.weights[i] } else { 0.0 })
                .collect(),
        );
        Ok((emb, grad))
    }
}

#[test]
fn linear_toy_closed_forms() {
    let toy = PositionLinear {
        values: vec![0.0, 0.5, 2.0, -1.0, 1.5],
        weights: vec![0.3, -2.0, 1.25, 0.5],
    };
    let ids = [2, 3, 4, 1];
    // logit_0 = 0.6 + 2.0 + 1.875 + 0.25 > 0, so class 0 is predicted
    let ixg = input_x_gradient(&toy, "d", &ids).unwrap();
    let expected: Vec<f64> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| toy.values[id as usize] * toy.weights[i])
        .collect();
    assert_eq!(ixg.scores, expected);
    let grad = gradient_saliency(&toy, "d", &ids).unwrap();
    assert_eq!(grad.scores, vec![0.3, 2.0, 1.25, 0.5]);
    // a zero embedding scores zero whatever its gradient
    let with_zero = input_x_gradient(&toy, "d", &[2, 0, 4, 1]).unwrap();
    assert_eq!(with_zero.scores[1], 0.0);
}

/// Bag of words: `logit_0 = Σ weight[id] − 1`, `logit_1 = 0`; position-free.
struct BagOfWords {
    weights: Vec<f64>,
}

impl Attributable for BagOfWords {
    fn class_probabilities(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let z = ids.iter().map(|&id| self.weights[id as usize]).sum::<f64>() - 1.0;
        Ok(crate::model::softmax(&[z, 0.0]))
    }

    fn embedding_gradient(&self, ids: &[u32], _: usize) -> Result<(Matrix, Matrix)> {
        Ok((Matrix::zeros(ids.len(), 1), Matrix::zeros(ids.len(), 1)))
    }

    fn mask_id(&self) -> u32 {
        0
    }
}

fn bag() -> BagOfWords {
    // 0 = mask, 1 = neutral, 2 = keyword, 3..=5 mixed evidence
    BagOfWords {
        weights: vec![0.0, 0.0, 3.0, 0.8, -0.4, 1.5],
    }
}

#[test]
fn duplicated_keyword_matters_less_than_a_unique_one() {
    let model = bag();
    let unique = occlusion(&model, "u", &[1, 1, 2, 1]).unwrap();
    let duplicated = occlusion(&model, "d", &[1, 2, 1, 2]).unwrap();
    assert!(duplicated.scores[1] < unique.scores[2]);
    assert_eq!(duplicated.scores[1], duplicated.scores[3]);
    assert_eq!(unique.scores[0], 0.0);
}

#[test]
fn occlusion_is_translation_consistent() {
    let model = bag();
    let prefix = [1u32; 3];
    for doc in [vec![3u32, 4, 5, 2], vec![5, 3, 3, 4, 1]] {
        let plain = occlusion(&model, "p", &doc).unwrap();
        let prefixed_ids: Vec<u32> = prefix.iter().chain(&doc).copied().collect();
        let prefixed = occlusion(&model, "q", &prefixed_ids).unwrap();
        assert_eq!(&prefixed.scores[prefix.len()..], plain.scores.as_slice());
        let rank = |s: &[f64]| {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            order
        };
        assert_eq!(rank(&prefixed.scores[prefix.len()..]), rank(&plain.scores));
    }
}

#[test]
fn occluding_a_pad_position_is_rejected() {
    let model = bag();
    assert!(occlusion_score(&model, &[1, 2], 1, 0).is_ok());
    assert!(matches!(
        occlusion_score(&model, &[1, 2], 2, 0),
        Err(EvalError::NotARealToken { position: 2, length: 2 })
    ));
}

fn small_model(seed: u64) -> Model {
    let vocab = Vocabulary::build(["goal match shares merger the a of late"], 50, 1);
    let cfg = ModelConfig::from_preset(Preset::Tiny, 2, vocab.len()).with_l_max(16);
    Model::new(cfg, vocab, seed).unwrap()
}

fn manifest_for(model: &Model, labels: &LabelSet) -> Manifest {
    Manifest {
        model_config: model.config.clone(),
        label_set: labels.names().to_vec(),
        l_max: model.config.l_max,
        lambda: 0.7,
        w_policy: PositiveWeight::Balanced,
        seed: 0,
    }
}

#[test]
fn model_embedding_gradient_matches_finite_differences() {
    let mut model = small_model(3);
    let ids = model.tokenize("late goal of the merger").ids;
    let (_, grad) = model.embedding_gradient(&ids, 1).unwrap();
    let logit = |m: &Model| m.params.class_head().logits(&m.encode(&ids).unwrap().pooled)[1];
    let eps = 1e-6;
    for (pos, &id) in ids.iter().enumerate() {
        for dim in [0, 7, 31] {
            let orig = model.params.token_emb[(id as usize, dim)];
            model.params.token_emb[(id as usize, dim)] = orig + eps;
            let up = logit(&model);
            model.params.token_emb[(id as usize, dim)] = orig - eps;
            let down = logit(&model);
            model.params.token_emb[(id as usize, dim)] = orig;
            let numeric = (up - down) / (2.0 * eps);
            assert!((grad[(pos, dim)] - numeric).abs() < 1e-6, "{pos} {dim}");
        }
    }
}

#[test]
fn constant_model_scores_zero() {
    let mut model = small_model(4);
    model.params.class_w = Matrix::zeros(model.config.d_model, 2);
    let ids = model.tokenize("late goal").ids;
    for method in [
        AttributionMethod::GradientSaliency,
        AttributionMethod::InputXGradient,
        AttributionMethod::Occlusion,
    ] {
        let a = attribute(&model, "d", &ids, method).unwrap();
        assert!(a.scores.iter().all(|&s| s == 0.0), "{method}");
    }
}

#[test]
fn attributions_cover_real_tokens_and_ignore_order() {
    let model = small_model(5);
    let texts = ["late goal", "the merger of shares late", "a"];
    let run = |order: &[usize]| {
        let mut out = std::collections::BTreeMap::new();
        for &k in order {
            let ids = model.tokenize(texts[k]).ids;
            for method in AttributionMethod::ALL {
                let a = attribute(&model, texts[k], &ids, method).unwrap();
                assert_eq!(a.scores.len(), ids.len());
                assert!(a.scores.iter().all(|s| s.is_finite()));
                out.insert((k, method), a.scores);
            }
        }
        out
    };
    assert_eq!(run(&[0, 1, 2]), run(&[2, 0, 1]));
    let grad = attribute(
        &model,
        "x",
        &model.tokenize("late goal").ids,
        AttributionMethod::GradientSaliency,
    )
    .unwrap();
    assert!(grad.scores.iter().all(|&s| s >= 0.0));
}

#[test]
fn evaluate_reports_consistent_totals() {
    let labels = LabelSet::new(["sports", "business"]).unwrap();
    let docs = vec![
        Document::new("a", "late goal", Some(0), Some(vec![Span::new(5, 9)])).unwrap(),
        Document::new("b", "the merger", Some(1), Some(vec![Span::new(4, 10)])).unwrap(),
        Document::new("c", "match of shares", Some(1), None).unwrap(),
    ];
    let corpus = Corpus::new(docs, labels.clone(), Split::Test).unwrap();
    let model = small_model(6);
    let manifest = manifest_for(&model, &labels);
    let options = EvalOptions {
        explainers: vec![AttributionMethod::Occlusion],
    };
    let eval = evaluate(&model, &manifest, &corpus, &options).unwrap();
    let r = &eval.report;
    assert_eq!(r.documents, 3);
    let predicted: u64 = r.per_class.iter().map(|c| c.tp + c.fp).sum();
    let gold: u64 = r.per_class.iter().map(|c| c.tp + c.fn_).sum();
    assert_eq!((predicted, gold), (3, 3));
    assert_eq!(r.saliency_agreement.len(), 2);
    assert_eq!(r.agreement(AttributionMethod::ModelSaliencyHead).unwrap().documents, 2);
    assert_eq!(eval.attributions.len(), 6);
    assert_eq!(
        evaluate(&model, &manifest, &corpus, &options).unwrap().report,
        eval.report
    );
    assert!(r.table().contains("micro-F1"));
}

#[test]
fn majority_model_scores_one_half() {
    let labels = LabelSet::new(["sports", "business"]).unwrap();
    let docs = (0..6)
        .map(|i| Document::new(format!("d{i}"), "late goal", Some(i % 2), None).unwrap())
        .collect();
    let corpus = Corpus::new(docs, labels.clone(), Split::Test).unwrap();
    let mut model = small_model(7);
    model.params.class_w = Matrix::zeros(model.config.d_model, 2);
    model.params.class_b = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
    let eval = evaluate(&model, &manifest_for(&model, &labels), &corpus, &EvalOptions::default()).unwrap();
    assert_eq!(eval.report.micro_f1, 0.5);
    assert!(eval.report.saliency_agreement.is_empty());
}

#[test]
fn evaluate_rejects_unlabelled_or_mismatched_corpora() {
    let labels = LabelSet::new(["sports", "business"]).unwrap();
    let model = small_model(8);
    let manifest = manifest_for(&model, &labels);
    let unlabelled = Corpus::new(
        vec![Document::new("a", "late goal", None, None).unwrap()],
        labels.clone(),
        Split::Test,
    )
    .unwrap();
    assert!(matches!(
        evaluate(&model, &manifest, &unlabelled, &EvalOptions::default()),
        Err(EvalError::NoGoldLabels)
    ));
    let other = LabelSet::new(["x", "y"]).unwrap();
    let corpus = Corpus::new(
        vec![Document::new("a", "goal", Some(0), None).unwrap()],
        other,
        Split::Test,
    )
    .unwrap();
    assert!(matches!(
        evaluate(&model, &manifest, &corpus, &EvalOptions::default()),
        Err(EvalError::Model(ModelError::ManifestMismatch(_)))
    ));
}

#[test]
fn method_names_round_trip() {
    for m in AttributionMethod::ALL {
        assert_eq!(m.name().parse::<AttributionMethod>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("lime".parse::<AttributionMethod>().is_err());
}
