use std::fs;
use std::path::Path;

use crsllm::corpus::{
    generate_synthetic_corpus, load_uneed_format, write_uneed_format, SyntheticSpec,
};
use crsllm::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        categories: vec!["Shoes".into(), "Phones".into()],
        dialogues: 40,
        ..SyntheticSpec::default()
    }
}

#[test]
fn write_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpora = generate_synthetic_corpus(&small_spec()).unwrap();
    write_uneed_format(dir.path(), &corpora).unwrap();
    let loaded = load_uneed_format(dir.path()).unwrap();
    assert_eq!(loaded.categories.len(), 2);
    assert_eq!(loaded.total(), 80);
    for c in &corpora {
        let back = &loaded.categories[&c.catalog.category.id];
        assert_eq!(back.split, c.split);
        assert_eq!(back.catalog.products(), c.catalog.products());
        assert_eq!(back.catalog.category, c.catalog.category);
    }
    let counts = loaded.counts();
    assert_eq!(counts.values().sum::<usize>(), 80);
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("notes.txt"), "nothing here").unwrap();
    assert!(matches!(
        load_uneed_format(dir.path()),
        Err(Error::NoCategoryFiles(_))
    ));
}

fn write_fixture(root: &Path, dialogues: &[&str]) {
    fs::write(
        root.join("tea.catalog.jsonl"),
        concat!(
            r#"{"product_id":"t1","category":"tea","attributes":{"origin":"yunnan","kind":"green"}}"#,
            "\n",
            r#"{"product_id":"t2","category":"tea","attributes":{"origin":"fujian","kind":"white"}}"#,
            "\n"
        ),
    )
    .unwrap();
    fs::write(root.join("tea.dialogues.jsonl"), dialogues.join("\n")).unwrap();
}

const GOOD: &str = r#"{"dialogue_id":"d1","category":"tea","split":"train","turns":[{"role":"user","text":"Some green tea please","frames":[{"attribute":"kind","value":"green"}]},{"role":"system","text":"Where from?","elicit":["origin"]},{"role":"user","text":"Yunnan"},{"role":"system","text":"Try this","recommend":["t1"]}]}"#;

#[test]
fn schema_is_inferred_without_schema_file() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &[GOOD]);
    let loaded = load_uneed_format(dir.path()).unwrap();
    let tea = &loaded.categories["tea"];
    assert_eq!(tea.split.train.len(), 1);
    let names: Vec<&str> = tea
        .catalog
        .category
        .attribute_schema
        .iter()
        .map(|a| a.name.as_str())
        .collect();
    assert_eq!(names, ["kind", "origin"]);
    assert_eq!(tea.split.train[0].turns[1].elicit_attributes, ["origin"]);
}

#[test]
fn user_turn_that_elicits_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"{"dialogue_id":"d2","category":"tea","split":"train","turns":[{"role":"user","text":"hi","elicit":["origin"]}]}"#;
    write_fixture(dir.path(), &[GOOD, bad]);
    match load_uneed_format(dir.path()) {
        Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected malformed, got {other:?}"),
    }
}

#[test]
fn orphan_products_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let orphan = r#"{"dialogue_id":"d3","category":"tea","split":"test","turns":[{"role":"user","text":"hi"},{"role":"system","text":"this","recommend":["t9","t8"]}]}"#;
    write_fixture(dir.path(), &[GOOD, orphan]);
    match load_uneed_format(dir.path()) {
        Err(Error::OrphanProducts { ids, .. }) => assert_eq!(ids, ["t8", "t9"]),
        other => panic!("expected orphans, got {other:?}"),
    }
}

#[test]
fn unknown_split_is_malformed() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &[&GOOD.replace("\"train\"", "\"holdout\"")]);
    assert!(matches!(
        load_uneed_format(dir.path()),
        Err(Error::Malformed { line: 1, .. })
    ));
}
