use std::collections::{BTreeMap, BTreeSet};

use scenereg_core::evalmetrics::*;
use scenereg_core::sceneworld::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn refs(rs: &[&str]) -> Vec<Vec<String>> {
    rs.iter().map(|r| toks(r)).collect()
}

struct Case {
    corpus: Vec<(&'static str, Vec<&'static str>)>,
    n: usize,
    expected: f64,
}

fn case(corpus: &[(&'static str, &[&'static str])], n: usize, expected: f64) -> Case {
    Case {
        corpus: corpus.iter().map(|(c, r)| (*c, r.to_vec())).collect(),
        n,
        expected,
    }
}

#[test]
fn bleu_hand_fixture() {
    let e = |x: f64| x.exp();
    let cases = [
        case(&[("left cow", &["cow on left"])], 1, e(-0.5)),
        case(&[("left cow", &["cow on left"])], 2, 0.0),
        case(&[("the white dog", &["the white dog"])], 1, 1.0),
        case(&[("the white dog", &["the white dog"])], 2, 1.0),
        case(&[("dog dog dog", &["the dog"])], 1, 1.0 / 3.0),
        case(&[("white dog", &["white dog on left", "dog"])], 1, 1.0),
        case(&[("white dog", &["white dog on left", "dog"])], 2, 1.0),
        // equally close references: the shorter length is used
        case(&[("red car", &["red", "red car on"])], 1, 1.0),
        case(&[("car", &["red car", "bus"])], 1, 1.0),
        case(&[("car", &["red car", "bus"])], 2, 0.0),
        case(&[("left red car", &["red car on left"])], 2, e(-1.0 / 3.0) * 0.5f64.sqrt()),
        case(&[("left red car", &["red car on left"])], 1, e(-1.0 / 3.0)),
        case(&[("left cow", &["cow on left"]), ("the white dog", &["the white dog"])], 1, e(-0.2)),
        case(
            &[("left cow", &["cow on left"]), ("the white dog", &["the white dog"])],
            2,
            e(-0.2) * (2.0f64 / 3.0).sqrt(),
        ),
        case(&[("cow cow", &["cow", "cow cow on"])], 1, 1.0),
        case(&[("cow cow", &["cow", "cow cow on"])], 2, 1.0),
        case(&[("bus", &["boat"])], 1, 0.0),
        case(&[("the dog on left", &["dog"])], 1, 0.25),
        case(&[("the dog on left", &["the dog on the left"])], 2, e(-0.25) * (2.0f64 / 3.0).sqrt()),
        case(&[("cow", &["cow"]), ("dog", &["cat"]), ("left bus", &["bus on left", "left bus"])], 1, 0.75),
    ];
    assert_eq!(cases.len(), 20);
    for (i, c) in cases.iter().enumerate() {
        let cands: Vec<_> = c.corpus.iter().map(|(h, _)| toks(h)).collect();
        let rs: Vec<_> = c.corpus.iter().map(|(_, r)| refs(r)).collect();
        let got = bleu_n(&cands, &rs, c.n).unwrap();
        assert!((got - c.expected).abs() < 1e-9, "case {i}: {got} vs {}", c.expected);
    }
    assert!((e(-0.5) - 0.6065).abs() < 1e-4);
}

#[test]
fn bleu_errors_and_bounds() {
    assert_eq!(bleu_n(&[], &[], 1), Err(MetricError::EmptyCorpus));
    assert!(matches!(bleu_n(&[toks("a")], &[], 1), Err(MetricError::Misaligned { .. })));

    let cands = vec![toks("left cow"), toks("dog on right")];
    let rs = vec![refs(&["cow on left"]), refs(&["the dog", "dog"])];
    let base = bleu_n(&cands, &rs, 1).unwrap();
    assert!((0.0..=1.0).contains(&base));
    // adding a perfect item does not lower BLEU-1
    let mut c2 = cands.clone();
    let mut r2 = rs.clone();
    c2.push(toks("white sheep"));
    r2.push(refs(&["white sheep"]));
    assert!(bleu_n(&c2, &r2, 1).unwrap() >= base);
}

/// Independent CIDEr-D: dense vectors over an explicit n-gram index.
fn cider_oracle(cands: &[Vec<String>], rs: &[Vec<Vec<String>>], scale: f64) -> f64 {
    let grams = |t: &[String], n: usize| -> Vec<Vec<String>> {
        if t.len() < n {
            vec![]
        } else {
            (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
        }
    };
    let mut index: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for t in cands.iter().chain(rs.iter().flatten()) {
        for n in 1..=4 {
            for g in grams(t, n) {
                let next = index.len();
                index.entry(g).or_insert(next);
            }
        }
    }
    let dim = index.len();
    let mut df = vec![0.0f64; dim];
    for r in rs {
        let mut seen = BTreeSet::new();
        for t in r {
            for n in 1..=4 {
                for g in grams(t, n) {
                    seen.insert(index[&g]);
                }
            }
        }
        for i in seen {
            df[i] += 1.0;
        }
    }
    let n_docs = rs.len() as f64;
    let vecs = |t: &[String]| -> Vec<Vec<f64>> {
        (1..=4)
            .map(|n| {
                let mut v = vec![0.0; dim];
                for g in grams(t, n) {
                    let i = index[&g];
                    v[i] += 1.0;
                }
                for i in 0..dim {
                    if v[i] > 0.0 {
                        v[i] *= n_docs.ln() - df[i].max(1.0).ln();
                    }
                }
                v
            })
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(rs) {
        let hv = vecs(c);
        let hl = c.len().saturating_sub(1) as f64;
        let mut item = 0.0;
        for t in r {
            let rv = vecs(t);
            let rl = t.len().saturating_sub(1) as f64;
            let pen = (-(hl - rl).powi(2) / 72.0).exp();
            for n in 0..4 {
                let mut s: f64 = (0..dim).map(|i| hv[n][i].min(rv[n][i]) * rv[n][i]).sum();
                let (a, b) = (norm(&hv[n]), norm(&rv[n]));
                if a != 0.0 && b != 0.0 {
                    s /= a * b;
                }
                item += s * pen / 4.0;
            }
        }
        total += item / r.len() as f64 * scale;
    }
    total / cands.len() as f64
}

fn ten_image_fixture() -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let data: [(&str, &[&str]); 10] = [
        ("left cow", &["cow on left", "left cow", "brown cow"]),
        ("white dog", &["white dog", "dog on right"]),
        ("the bus", &["red bus", "bus"]),
        ("cow cow cow", &["cow on top"]),
        ("boat on left", &["left boat", "white boat on left"]),
        ("man on right", &["guy on right", "right man", "man"]),
        ("red car on bottom", &["red car", "bottom car", "car on bottom"]),
        ("sheep", &["black sheep on left", "sheep on left"]),
        ("bird", &["duck on top"]),
        ("white laptop on the left", &["laptop on left", "white computer"]),
    ];
    (
        data.iter().map(|(c, _)| toks(c)).collect(),
        data.iter().map(|(_, r)| refs(r)).collect(),
    )
}

#[test]
fn cider_matches_bruteforce() {
    let (cands, rs) = ten_image_fixture();
    let got = cider(&cands, &rs).unwrap();
    let want = cider_oracle(&cands, &rs, 10.0);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!(got > 0.0);
    // the ×10 factor applied to the oracle's unscaled mean
    let unscaled = cider_oracle(&cands, &rs, 1.0);
    assert!((got - 10.0 * unscaled).abs() < 1e-9);

    let items = cider_items(&cands, &rs).unwrap();
    assert!((items.iter().sum::<f64>() / 10.0 - got).abs() < 1e-12);
    // item 9 ("bird" vs "duck on top") shares nothing
    assert_eq!(items[8], 0.0);
}

#[test]
fn cider_two_image_hand_value() {
    // idf of each word is ln 2; only unigrams are nonempty, cosine 1, so
    // each item scores 10 · (1 + 0 + 0 + 0) / 4
    let cands = vec![toks("cow"), toks("dog")];
    let rs = vec![refs(&["cow"]), refs(&["dog"])];
    assert!((cider(&cands, &rs).unwrap() - 2.5).abs() < 1e-12);
    assert!((cider_oracle(&cands, &rs, 10.0) - 2.5).abs() < 1e-12);

    let cands = vec![toks("boat"), toks("car")];
    assert_eq!(cider(&cands, &rs).unwrap(), 0.0);
}

#[test]
fn cider_degenerate_corpus() {
    let r = cider(&[toks("cow")], &[refs(&["cow"])]);
    assert!(matches!(r, Err(MetricError::DegenerateCorpus(_))));
    let r = cider(&[toks("cow"), toks("cow")], &[refs(&["cow"]), refs(&["cow"])]);
    assert!(matches!(r, Err(MetricError::DegenerateCorpus(_))));
}

#[test]
fn evaluate_bundles_metrics() {
    let (cands, rs) = ten_image_fixture();
    let rep = evaluate(&cands, &rs).unwrap();
    assert_eq!(rep.n_items, 10);
    assert_eq!(rep.per_item.len(), 10);
    assert_eq!(rep.bleu1, bleu_n(&cands, &rs, 1).unwrap());
    assert_eq!(rep.cider, cider(&cands, &rs).unwrap());
    assert!(rep.per_item.iter().all(|s| (0.0..=1.0).contains(&s.bleu1) && s.cider >= 0.0));
}

fn cat(id: u16, name: &str, syns: &[&str]) -> Category {
    Category {
        id,
        canonical_name: name.into(),
        synonyms: syns.iter().map(|s| s.to_string()).collect(),
        group: Group::B,
        kind: Kind::Thing,
        color: vec![0.5; 3],
    }
}

fn judge_world() -> (CategoryVocabulary, Scene) {
    let mut grass = cat(3, "grass", &["grass"]);
    grass.kind = Kind::Stuff;
    let vocab = CategoryVocabulary {
        categories: vec![
            cat(0, "dog", &["dog", "puppy"]),
            cat(1, "cat", &["cat", "kitty"]),
            cat(2, "teddy bear", &["teddy bear", "teddy", "bear"]),
            grass,
        ],
        generic_nouns: ["thing".to_string(), "one".to_string()].into(),
        colors: vec![
            ColorAttr {
                name: "white".into(),
                value: vec![1.0; 3],
            },
            ColorAttr {
                name: "black".into(),
                value: vec![0.0; 3],
            },
        ],
    };
    let inst = |id: u16, c: u16, b: [usize; 4]| Instance {
        instance_id: id,
        category: c,
        bbox: BBox::from(b),
        color_attr: "white".into(),
    };
    let scene = Scene {
        width: 10,
        height: 10,
        appearance: Grid::new(10, 10, 3),
        panoptic_category: Grid::filled(10, 10, 1, 3),
        panoptic_instance: Grid::filled(10, 10, 1, NO_INSTANCE),
        // dog 0 overlaps cat 1; dog 2 overlaps nothing; bear 3 far away
        instances: vec![
            inst(0, 0, [0, 0, 3, 3]),
            inst(1, 1, [2, 2, 5, 5]),
            inst(2, 0, [7, 0, 9, 2]),
            inst(3, 2, [7, 7, 9, 9]),
        ],
        template_name: "hand".into(),
    };
    (vocab, scene)
}

#[test]
fn judge_rules() {
    let (vocab, scene) = judge_world();
    let lex = JudgeLexicon::from_vocabulary(&vocab);
    let j = |s: &str, t: u16| judge_type(&toks(s), &scene, t, &lex);

    let a = j("black dog", 2);
    assert_eq!(a.category, JudgmentCategory::A);
    assert_eq!(a.matched_type_word.as_deref(), Some("dog"));
    assert_eq!(j("the puppy on left", 0).category, JudgmentCategory::A);

    let o = j("thing on left", 0);
    assert_eq!(o.category, JudgmentCategory::O);
    assert_eq!(o.matched_type_word, None);
    assert_eq!(j("it", 0).category, JudgmentCategory::O);
    assert_eq!(j("", 0).category, JudgmentCategory::O);

    assert_eq!(j("cat", 2).category, JudgmentCategory::F);
    let m = j("white cat", 0);
    assert_eq!(m.category, JudgmentCategory::M);
    assert_eq!(m.matched_instance, Some(1));
    assert_eq!(m.matched_type_word.as_deref(), Some("cat"));

    // a type word for the target wins over an earlier misaligned one
    assert_eq!(j("cat dog", 0).category, JudgmentCategory::A);

    // longest match: "teddy bear" is one type word
    let lexed = lex.scan(&toks("the teddy bear"));
    assert_eq!(lexed, vec![(2, "teddy bear".to_string())]);
    assert_eq!(j("teddy bear", 3).category, JudgmentCategory::A);
    assert_eq!(j("teddy bear", 0).category, JudgmentCategory::F);
}

#[test]
fn judge_agrees_with_ground_truth_references() {
    let cfg = WorldConfig::builtin(
        DatasetMode::LocEnabled,
        [
            (SplitName::Train, 150),
            (SplitName::Val, 0),
            (SplitName::TestA, 50),
            (SplitName::TestB, 50),
        ],
        17,
    );
    let (ds, _) = build_dataset(&cfg).unwrap();
    let lex = JudgeLexicon::from_vocabulary(&ds.vocabulary);
    let (mut adequate, mut total) = (0, 0);
    for s in ds.splits.values().flatten().filter(|s| !s.flagged) {
        for r in &s.references {
            total += 1;
            adequate += (judge_type(&r.tokens, &s.scene, s.target, &lex).category == JudgmentCategory::A) as usize;
        }
    }
    assert!(total > 0);
    assert!(adequate as f64 >= 0.99 * total as f64, "{adequate}/{total}");
}

use JudgmentCategory::{A, F, M, O};

#[test]
fn kappa_fixtures() {
    let perfect = vec![vec![A, A, A], vec![F, F, F], vec![O, O, O]];
    assert!((fleiss_kappa(&perfect).unwrap().kappa - 1.0).abs() < 1e-12);

    // per-item agreement 1, 1/3, 0, 1 → P̄ = 7/12; marginals 5,1,4,2 of 12
    // → P̄e = 46/144; κ = 19/49
    let hand = vec![vec![A, A, A], vec![A, A, F], vec![M, O, F], vec![O, O, O]];
    let rep = fleiss_kappa(&hand).unwrap();
    assert!((rep.kappa - 19.0 / 49.0).abs() < 1e-12, "{}", rep.kappa);
    assert_eq!((rep.n_items, rep.n_annotators), (4, 3));
    assert!((rep.marginals[&A] - 5.0 / 12.0).abs() < 1e-15);

    // P̄ = 1/2 = P̄e
    let chance = vec![vec![A, A], vec![A, F], vec![F, F], vec![F, A]];
    assert!(fleiss_kappa(&chance).unwrap().kappa.abs() < 1e-12);

    let all_a = vec![vec![A, A, A], vec![A, A, A]];
    assert!(matches!(fleiss_kappa(&all_a), Err(MetricError::UndefinedKappa(_))));
    assert!(fleiss_kappa(&[vec![A]]).is_err());
}

#[test]
fn kappa_is_permutation_invariant() {
    let hand = vec![vec![A, M, F], vec![A, A, F], vec![M, O, F], vec![O, O, A], vec![F, F, M]];
    let k = fleiss_kappa(&hand).unwrap().kappa;
    for perm in [[0, 2, 1], [1, 0, 2], [2, 1, 0], [1, 2, 0]] {
        let p: Vec<Vec<_>> = hand.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect();
        assert!((fleiss_kappa(&p).unwrap().kappa - k).abs() < 1e-12);
    }
}

#[test]
fn majority_votes() {
    assert_eq!(majority_vote(&[A, A, F]).unwrap(), A);
    assert_eq!(majority_vote(&[A, F, O]).unwrap(), F);
    assert_eq!(majority_vote(&[M, M, A]).unwrap(), M);
    assert_eq!(majority_vote(&[A, O, O, A]).unwrap(), O);
    assert_eq!(majority_vote(&[A, M, O]).unwrap(), M);
}

#[test]
fn judgment_names() {
    for c in JudgmentCategory::ALL {
        assert_eq!(c.as_str().parse::<JudgmentCategory>().unwrap(), c);
        assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
    }
}
