mod common;

use std::sync::Arc;

use dialect_frontend::corpus::joined;
use dialect_frontend::guard::PatternSet;
use dialect_frontend::model::ModelKind;
use dialect_frontend::pipeline::*;
use dialect_frontend::text::preprocess;
use dialect_frontend::Error;
use proptest::prelude::*;

const DEFAULT_ORDER: [&str; 9] = [
    "guard",
    "translate",
    "unguard",
    "preprocess",
    "tn",
    "cws",
    "pos",
    "prosody",
    "g2p",
];

fn identity_ctx() -> StageContext {
    StageContext::default()
}

#[test]
fn default_order_is_the_frontend_order() {
    let p = Pipeline::default_with(&identity_ctx()).unwrap();
    assert_eq!(p.stage_names(), DEFAULT_ORDER);
    let doc = p.run("我们去").unwrap();
    let traced: Vec<&str> = doc.trace.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(traced, DEFAULT_ORDER);
    assert_eq!(doc.original, "我们去");
    assert_eq!(doc.phonemes, vec!["PH(我)", "PH(们)", "PH(去)"]);
    assert_eq!(doc.pos_tags.iter().filter(|t| *t != "X").count(), 0);
    assert!(doc.prosody_breaks.is_empty());
}

#[test]
fn misordered_stages_are_rejected() {
    let ctx = identity_ctx();
    for names in [
        vec!["guard", "unguard", "translate"],
        vec!["translate", "guard", "unguard"],
        vec!["unguard"],
    ] {
        assert!(
            matches!(Pipeline::from_names(&names, &ctx), Err(Error::Config(_))),
            "{names:?}"
        );
    }
    assert!(Pipeline::from_names(&["guard", "frobnicate"], &ctx).is_err());
    assert!(Pipeline::from_names::<&str>(&[], &ctx).is_err());
    assert!(Pipeline::from_names(&["preprocess", "g2p"], &ctx).is_ok());
}

#[test]
fn stage_file_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stages.txt");
    std::fs::write(&path, "guard\ntranslate\nunguard\n\ng2p\n").unwrap();
    let p = Pipeline::load(&path, &identity_ctx()).unwrap();
    assert_eq!(p.stage_names(), ["guard", "translate", "unguard", "g2p"]);
    std::fs::write(&path, "guard\nmystery\n").unwrap();
    assert!(Pipeline::load(&path, &identity_ctx()).is_err());
}

#[test]
fn trained_model_keeps_urls_and_matches_gold_targets() {
    let t = common::tiny(30, 12);
    let model = Arc::new(common::overfit(ModelKind::Nat, &t, 120));
    let ctx = StageContext {
        model: Some(model.clone()),
        patterns: PatternSet::default(),
        lexicon: model.lexicon.clone(),
    };
    let p = Pipeline::default_with(&ctx).unwrap();
    let doc = p.run("看 https://a.com").unwrap();
    assert!(doc.translated.as_deref().unwrap().contains("https://a.com"));

    let mut exact = 0;
    for (src, tgt) in &t.pairs {
        let doc = p.run(&joined(src)).unwrap();
        let direct = model.translate(&joined(src), &PatternSet::default()).unwrap().text;
        assert_eq!(doc.translated.as_deref(), Some(direct.as_str()));
        exact += usize::from(direct == joined(tgt));
    }
    assert!(exact >= 28, "{exact}/30");
}

#[test]
fn tsv_rows_have_three_fields() {
    let p = Pipeline::default_with(&identity_ctx()).unwrap();
    let doc = p.run("你好 www.a.org").unwrap();
    let row = tsv_row(&doc);
    let cols: Vec<&str> = row.split('\t').collect();
    assert_eq!(cols.len(), 3);
    assert_eq!(cols[0], "你好 www.a.org");
    assert!(cols[1].contains("www.a.org"));
}

proptest! {
    #[test]
    fn identity_pipeline_preserves_text(t in "[我们去你好 　Ａｂ\\x07a-z.:/@]{0,30}") {
        let p = Pipeline::default_with(&identity_ctx()).unwrap();
        let doc = p.run(&t).unwrap();
        prop_assert_eq!(&doc.original, &t);
        let normalized = doc.normalized.clone().unwrap();
        prop_assert_eq!(normalized, preprocess(&doc.translated.clone().unwrap()));
        for e in &doc.trace {
            prop_assert!(!e.stage.is_empty());
        }
    }

    #[test]
    fn guarded_spans_survive_identity_pipeline(user in "[a-z]{2,6}", host in "[a-z]{3,8}", pre in "[我们去]{0,4}") {
        let p = Pipeline::default_with(&identity_ctx()).unwrap();
        let url = format!("https://{host}.com/{user}");
        let mail = format!("{user}@{host}.cn");
        let doc = p.run(&format!("{pre}{url} {mail}{pre}")).unwrap();
        let n = doc.normalized.unwrap();
        prop_assert!(n.contains(&url) && n.contains(&mail));
    }
}
