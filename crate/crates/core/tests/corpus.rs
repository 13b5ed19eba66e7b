use std::collections::BTreeSet;

use curriculum_core::corpus::{
    detokenize, format_records, parse_records, split_corpus, split_documents, tokenize, Document,
};
use proptest::prelude::*;

fn docs(per_domain: usize, domains: usize) -> Vec<Document> {
    (0..domains)
        .flat_map(|d| {
            (0..per_domain).map(move |i| Document::new(format!("d{d}-{i:03}"), format!("dom{d}"), "x".repeat(40 + i)))
        })
        .collect()
}

#[test]
fn record_files_round_trip_escapes() {
    let d = vec![
        Document::new("a", "prose", "line one\nline\ttwo \\ end"),
        Document::new("b", "code", "fn main() {}"),
    ];
    assert_eq!(parse_records(&format_records(&d)).unwrap(), d);
}

#[test]
fn too_few_documents_in_a_domain_is_an_error() {
    assert!(split_documents(&docs(2, 1), 0.3, 0.2, 0).is_err());
}

#[test]
fn missing_windows_are_reported_by_split() {
    let err = split_corpus(&docs(5, 1), 0.3, 0.2, 0, 4096).unwrap_err();
    assert!(err.to_string().contains("window"), "{err}");
}

proptest! {
    #[test]
    fn split_is_deterministic_disjoint_and_covering(per in 3usize..30, n_dom in 1usize..4, seed in any::<u64>()) {
        let all = docs(per, n_dom);
        let a = split_documents(&all, 0.3, 0.2, seed).unwrap();
        prop_assert_eq!(&a, &split_documents(&all, 0.3, 0.2, seed).unwrap());
        let idset = |v: &[Document]| v.iter().map(|d| d.doc_id.clone()).collect::<BTreeSet<_>>();
        let (p, t, v) = (idset(&a.proxy), idset(&a.train), idset(&a.validation));
        prop_assert!(p.is_disjoint(&t) && p.is_disjoint(&v) && t.is_disjoint(&v));
        prop_assert_eq!(p.len() + t.len() + v.len(), all.len());
        for d in 0..n_dom {
            let dom = format!("dom{d}");
            for part in [&a.proxy, &a.train, &a.validation] {
                prop_assert!(part.iter().any(|x| x.domain == dom));
            }
        }
    }

    #[test]
    fn tokenize_round_trips(s in ".*") {
        let t = tokenize(&s);
        prop_assert_eq!(t.len(), s.len());
        prop_assert!(t.iter().all(|&x| x < 256));
        prop_assert_eq!(detokenize(&t).unwrap(), s);
    }
}
