mod common;

use std::collections::BTreeSet;

use asu::su_bank::{build_bank, load_categories, merge_banks, BankOptions, Category, Lexicon, SemanticBank, SemanticUnit};
use common::{assert_golden, fixture};
use proptest::prelude::*;

fn fixture_labels() -> Vec<String> {
    std::fs::read_to_string(fixture("labels10.txt"))
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

fn fixture_bank() -> SemanticBank {
    let build = build_bank(
        &fixture_labels(),
        &Lexicon::load(&fixture("lexicon10.json")).unwrap(),
        &load_categories(&fixture("categories10.json")).unwrap(),
        &BankOptions::default(),
    )
    .unwrap();
    assert!(build.rejected.is_empty(), "{}", build.rejection_report());
    build.bank
}

#[test]
fn ten_label_fixture_matches_golden_bank() {
    let bank = fixture_bank();
    assert_golden("bank10.json", bank.to_json().unwrap().as_bytes());
    assert_eq!(SemanticBank::load(&fixture("bank10.json")).unwrap(), bank);
}

#[test]
fn fixture_bank_shape() {
    let bank = fixture_bank();
    let counts = bank.category_counts();
    assert_eq!(counts.values().sum::<usize>(), bank.len());
    // 18 categorized terms, plus the 6 body presets, "teeth" being extra body.
    assert_eq!(bank.len(), 24);
    assert_eq!(counts[&Category::Body], 7);
    let side_kick = &bank.units()[bank.index_of("side kick").unwrap()];
    assert_eq!(side_kick.category, Category::Motion);
    let golf = &bank.units()[bank.index_of("golf").unwrap()];
    assert_eq!(golf.composed_text(), "golf, a game played with clubs and a small hard ball on a course");
    assert_eq!(bank.units()[bank.index_of("head").unwrap()].composed_text(), "head");
}

#[test]
fn building_is_deterministic_and_order_free() {
    let a = fixture_bank().to_json().unwrap();
    assert_eq!(a, fixture_bank().to_json().unwrap());
    let mut labels = fixture_labels();
    labels.reverse();
    let b = build_bank(
        &labels,
        &Lexicon::load(&fixture("lexicon10.json")).unwrap(),
        &load_categories(&fixture("categories10.json")).unwrap(),
        &BankOptions::default(),
    )
    .unwrap();
    let names = |bank: &SemanticBank| bank.units().iter().map(|u| u.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&b.bank), names(&fixture_bank()));
}

fn unit(name: &str, cat: Category) -> SemanticUnit {
    SemanticUnit {
        name: name.to_owned(),
        description: String::new(),
        category: cat,
        sources: Vec::new(),
    }
}

fn bank_strategy() -> impl Strategy<Value = SemanticBank> {
    // Category is a function of the name so random banks never conflict.
    prop::collection::vec(0u8..24, 0..10).prop_map(|ids| {
        let units = ids
            .into_iter()
            .map(|i| unit(&format!("w{i}"), Category::ALL[i as usize % 4]))
            .collect();
        SemanticBank::from_units(units).unwrap()
    })
}

fn texts(b: &SemanticBank) -> BTreeSet<String> {
    b.composed_texts().into_iter().collect()
}

#[test]
fn merge_examples() {
    let x = SemanticBank::from_units(vec![unit("a", Category::Body), unit("b", Category::Scene), unit("c", Category::Object)]).unwrap();
    let y = SemanticBank::from_units(
        ["d", "e", "f", "g"].iter().map(|n| unit(n, Category::Motion)).collect(),
    )
    .unwrap();
    assert_eq!(merge_banks(&x, &y).unwrap().len(), 7);
    assert_eq!(merge_banks(&x, &x).unwrap(), x);
    assert_eq!(merge_banks(&x, &SemanticBank::empty()).unwrap(), x);
    let clash = SemanticBank::from_units(vec![unit("a", Category::Scene)]).unwrap();
    assert!(merge_banks(&x, &clash).is_err());
}

proptest! {
    #[test]
    fn merge_is_commutative_and_associative(a in bank_strategy(), b in bank_strategy(), c in bank_strategy()) {
        let ab = merge_banks(&a, &b).unwrap();
        prop_assert_eq!(texts(&ab), texts(&merge_banks(&b, &a).unwrap()));
        let left = merge_banks(&ab, &c).unwrap();
        let right = merge_banks(&a, &merge_banks(&b, &c).unwrap()).unwrap();
        prop_assert_eq!(texts(&left), texts(&right));
        prop_assert_eq!(left.len(), texts(&left).len());
    }

    #[test]
    fn category_counts_sum_to_bank_size(a in bank_strategy()) {
        prop_assert_eq!(a.category_counts().values().sum::<usize>(), a.len());
        let back = SemanticBank::from_json(&a.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, a);
    }
}
