use fanout::registry::{AgentPreset, Capability, CapabilityKind, CapabilitySource, PresetStore, Registry, RegistryError};
use proptest::prelude::*;

fn cap(id: &str, locator: &str) -> Capability {
    Capability {
        id: id.into(),
        name: format!("{id} tool"),
        description: format!("does {id} things"),
        kind: CapabilityKind::Tool,
        locator: locator.into(),
    }
}

fn registry(ids: &[String], version: u32) -> Registry {
    Registry::from_capabilities(ids.iter().map(|id| cap(id, &format!("local://{id}/v{version}")))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn presets_bind_capabilities_at_launch(ids in prop::collection::btree_set("[a-z]{1,6}", 1..6), pick in prop::collection::vec(any::<prop::sample::Index>(), 0..4)) {
        let ids: Vec<String> = ids.into_iter().collect();
        let chosen: Vec<String> = pick.iter().map(|i| ids[i.index(ids.len())].clone()).collect();
        let store = PresetStore::new();
        let saved = store.upsert(AgentPreset::new("p", "prompt", chosen.clone()), &registry(&ids, 1)).unwrap();
        prop_assert_eq!(&saved.capabilities, &chosen);
        let stored = serde_json::to_value(store.get("p").unwrap()).unwrap();
        prop_assert!(!stored.to_string().contains("local://"));

        let resolved = store.get("p").unwrap().resolve(&registry(&ids, 2)).unwrap();
        prop_assert_eq!(resolved.len(), chosen.len());
        for (c, id) in resolved.iter().zip(&chosen) {
            prop_assert_eq!(&c.locator, &format!("local://{id}/v2"));
        }
        if !chosen.is_empty() {
            let fewer: Vec<String> = ids.iter().filter(|i| **i != chosen[0]).cloned().collect();
            let gone = matches!(store.get("p").unwrap().resolve(&registry(&fewer, 3)), Err(RegistryError::UnknownCapability(_)));
            prop_assert!(gone);
        }
    }

    #[test]
    fn reads_have_no_side_effects(ids in prop::collection::btree_set("[a-z]{1,6}", 0..8), needles in prop::collection::vec("[a-z]{0,3}", 1..6)) {
        let ids: Vec<String> = ids.into_iter().collect();
        let r = registry(&ids, 1);
        let before = r.list().unwrap();
        for n in &needles {
            let first = r.search(n);
            prop_assert_eq!(&first, &r.search(n));
            for c in &first {
                prop_assert!(c.id.contains(n.as_str()) || c.name.contains(n.as_str()) || c.description.contains(n.as_str()));
            }
            let expected = ids.iter().filter(|i| i.contains(n.as_str()) || "tool".contains(n.as_str()) || "does things".contains(n.as_str())).count();
            prop_assert_eq!(first.len(), expected);
            for id in &ids {
                prop_assert_eq!(r.get(id).unwrap().id, id.clone());
            }
        }
        prop_assert_eq!(before, r.list().unwrap());
    }
}

#[test]
fn upserts_reject_unknown_capabilities_and_keep_the_old_preset() {
    let r = registry(&["grep".into()], 1);
    let store = PresetStore::new();
    store.upsert(AgentPreset::new("p", "v1", vec!["grep".into()]), &r).unwrap();
    let bad = store.upsert(AgentPreset::new("p", "v2", vec!["nope".into()]), &r);
    assert!(matches!(bad, Err(RegistryError::UnknownCapability(_))));
    assert_eq!(store.get("p").unwrap().prompt, "v1");
    assert!(matches!(store.upsert(AgentPreset::new(" ", "x", vec![]), &r), Err(RegistryError::InvalidPreset(_))));
    store.delete("p").unwrap();
    assert!(matches!(store.get("p"), Err(RegistryError::UnknownPreset(_))));
}
