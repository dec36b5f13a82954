mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqlboot::metrics::{evaluate, score_example};
use sqlboot::sql::{equal_exact, equal_no_order, normalize, parse_sql};

use common::QueryParts;

const GOLD: &str = r#"SELECT va.victim FROM incidents AS va WHERE va.aggressor = "pirates" AND va.victim = "container ship""#;
const REORDERED: &str = r#"SELECT va.victim FROM incidents AS va WHERE va.victim = "container ship" AND va.aggressor = "pirates""#;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exact_implies_no_order(a in any::<u64>(), b in any::<u64>(), same in any::<bool>()) {
        let qa = QueryParts::random(&mut ChaCha8Rng::seed_from_u64(a)).render();
        let qb = if same { qa.clone() } else { QueryParts::random(&mut ChaCha8Rng::seed_from_u64(b)).render() };
        let (pa, pb) = (parse_sql(&qa).unwrap(), parse_sql(&qb).unwrap());
        if equal_exact(&pa, &pb) {
            prop_assert!(equal_no_order(&pa, &pb));
        }
        prop_assert!(equal_exact(&pa, &pa));
    }

    #[test]
    fn clause_shuffles_are_order_insensitive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = QueryParts::random(&mut rng);
        let s = q.shuffled(&mut rng);
        let (pa, pb) = (parse_sql(&q.render()).unwrap(), parse_sql(&s.render()).unwrap());
        prop_assert!(equal_no_order(&pa, &pb), "{} vs {}", q.render(), s.render());
        let score = score_example(Some(&s.render()), &pa);
        prop_assert_eq!(score.component_f1, 1.0);
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>()) {
        let q = QueryParts::random(&mut ChaCha8Rng::seed_from_u64(seed)).render();
        let once = normalize(&q).unwrap();
        prop_assert_eq!(normalize(&once).unwrap(), once.clone());
        prop_assert!(equal_exact(&parse_sql(&q).unwrap(), &parse_sql(&once).unwrap()));
    }
}

#[test]
fn where_reorder_example() {
    let gold = parse_sql(GOLD).unwrap();
    let pred = parse_sql(REORDERED).unwrap();
    assert!(!equal_exact(&gold, &pred));
    assert!(equal_no_order(&gold, &pred));
    let report = evaluate(&[Some(REORDERED.to_string())], &[GOLD.to_string()]).unwrap();
    assert_eq!(report.exact_match_acc, 0.0);
    assert_eq!(report.exact_match_no_order_acc, 1.0);
    assert_eq!(report.component_f1, 1.0);
}

#[test]
fn whitespace_and_keyword_case_do_not_matter() {
    let a = parse_sql("select   va.victim from incidents as va where va.aggressor = 'pirates'").unwrap();
    let b = parse_sql(r#"SELECT va.victim FROM incidents AS va WHERE va.aggressor = "pirates""#).unwrap();
    assert!(equal_exact(&a, &b));
}

#[test]
fn different_values_differ() {
    let a = parse_sql(GOLD).unwrap();
    let b = parse_sql(&GOLD.replace("pirates", "robbers")).unwrap();
    assert!(!equal_no_order(&a, &b));
}
