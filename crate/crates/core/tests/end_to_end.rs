use polimatch_core::embedding::{embed, read_store, write_store, MockEmbedder, VectorStore};
use polimatch_core::matching::{aggregate_institution, coverage, match_all, OpportunityLabel, Scope};
use polimatch_core::model::{CofogDivision, Tier, TierThresholds};
use polimatch_core::opportunity::{
    compose_opportunity_text, load_opportunities, rewrite_all, InputFormat, TemplateRewriter,
};
use polimatch_core::scholar::{invert, reconstruct_abstract, DocType, Publication};
use polimatch_core::vindex::{brute_force_search, build_index, SearchConfig};

const OPPS: &str = r#"{"id":"op-1","title":"Hospital waiting times","description":"Evidence on hospital waiting times and outpatient capacity in the national health service.","organisation":"Department of Health","country":"GB","opportunity_type":"ARI","cofog":"07","source_url":"https://example.org/op-1"}
{"id":"op-2","title":"Flood defence investment","description":"Research on flood defence investment, coastal erosion and protection of housing from storm surges.","organisation":"Environment Agency","country":"GB","opportunity_type":"Consultation","cofog":"05","source_url":"https://example.org/op-2"}
"#;

fn work(id: &str, inst: &str, text: &str) -> Publication {
    Publication {
        id: id.into(),
        title: text.split_whitespace().take(4).collect::<Vec<_>>().join(" "),
        abstract_text: reconstruct_abstract(&invert(text)),
        year: 2023,
        doc_type: DocType::JournalArticle,
        author_ids: vec![format!("A-{id}")],
        institution_ids: vec![inst.into()],
        is_paratext: false,
        is_retracted: false,
    }
}

#[test]
fn opportunities_flow_through_rewrite_embed_index_and_coverage() {
    let report = load_opportunities(OPPS.as_bytes(), InputFormat::Ndjson, None).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    let opps = report.records;
    let rewrites = rewrite_all(&opps, &TemplateRewriter).unwrap();
    let texts: Vec<String> = rewrites.iter().map(compose_opportunity_text).collect();
    let opp_vecs = embed(&texts, &MockEmbedder).unwrap();

    let pubs = [
        work("W1", "I1", &texts[0]),
        work("W2", "I2", &texts[1]),
        work(
            "W3",
            "I2",
            "Phonon transport in layered crystals measured by picosecond thermoreflectance at low temperature.",
        ),
    ];
    let pub_texts: Vec<String> = pubs
        .iter()
        .map(|p| polimatch_core::scholar::compose_publication_text(p).unwrap())
        .collect();
    let store = VectorStore::from_vectors(
        pubs.iter()
            .map(|p| p.id.clone())
            .zip(embed(&pub_texts, &MockEmbedder).unwrap()),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pubs.ovec");
    write_store(&store, &path).unwrap();
    let reloaded = read_store(&path).unwrap();
    assert_eq!(reloaded.ids(), store.ids());

    let index = build_index(reloaded.clone()).unwrap();
    let cfg = SearchConfig::new(3).unwrap();
    for v in &opp_vecs {
        let fast = index.search(v.as_slice(), cfg).unwrap();
        assert_eq!(fast, brute_force_search(&reloaded, v.as_slice(), cfg).unwrap());
    }

    let queries: Vec<(String, Vec<f32>)> = opps
        .iter()
        .map(|o| o.id.clone())
        .zip(opp_vecs.into_iter().map(|v| v.into_inner()))
        .collect();
    let records = match_all(&queries, &index, &TierThresholds::default(), cfg).unwrap();
    // Each opportunity's own text is a near-exact Green hit.
    for (opp, work) in [("op-1", "W1"), ("op-2", "W2")] {
        let r = records
            .iter()
            .find(|r| r.opportunity_id == opp && r.publication_id == work)
            .unwrap();
        assert_eq!(r.tier, Tier::Green, "{r:?}");
    }

    let pub_insts = pubs.iter().map(|p| (p.id.clone(), p.institution_ids.clone())).collect();
    let agg = aggregate_institution(&records, &pub_insts);
    let labels: Vec<OpportunityLabel> = opps.iter().map(OpportunityLabel::from).collect();
    let insts = vec!["I1".to_string(), "I2".to_string()];
    let health = coverage(&agg, &labels, Scope::Division(CofogDivision::Health), &insts).unwrap();
    assert_eq!(
        health
            .iter()
            .map(|r| (r.n_opportunities, r.n_covered))
            .collect::<Vec<_>>(),
        [(1, 1), (1, 0)]
    );
    let all = coverage(&agg, &labels, Scope::All, &insts).unwrap();
    assert!(
        all.iter().all(|r| r.n_opportunities == 2 && r.coverage_pct == 50.0),
        "{all:?}"
    );
    assert!(coverage(&agg, &labels, Scope::Division(CofogDivision::Defence), &insts).is_err());
}
