use std::net::SocketAddr;
use std::sync::{Arc, Barrier};
use std::thread;

use safebt_core::safety::builtin_spec_documents;
use safebt_registry::{sha256_hex, Client, ClientError, Kind, ServerHandle, Store};

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn doc(name: &str) -> String {
    builtin_spec_documents().into_iter().find(|(n, _)| *n == name).unwrap().1.to_owned()
}

/// Spec document for `name@version` derived from a shipped one.
fn variant(name: &str, version: &str, description: &str) -> String {
    let mut spec = safebt_core::safety::BarrierSpec::from_json(&doc("battery_min")).unwrap();
    spec.name = name.into();
    spec.version = version.into();
    spec.description = description.into();
    spec.to_json()
}

#[test]
fn http_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServerHandle::start(Store::open(dir.path()).unwrap(), local()).unwrap();
    let client = Client::new(&server.url()).unwrap();
    client.health().unwrap();

    let body = doc("human_distance");
    let (meta, created) = client.publish(Kind::Spec, "human_distance", "1.0.0", body.as_bytes(), "lab-a").unwrap();
    assert!(created);
    assert_eq!(meta.digest, sha256_hex(body.as_bytes()));
    assert_eq!(meta.publisher, "lab-a");
    let (again, created) = client.publish(Kind::Spec, "human_distance", "1.0.0", body.as_bytes(), "lab-b").unwrap();
    assert!(!created);
    assert_eq!(again, meta);
    assert_eq!(client.fetch(Kind::Spec, "human_distance", "1.0.0").unwrap(), body.as_bytes());

    let changed = body.replacen("\"description\": \"", "\"description\": \"Revised. ", 1).into_bytes();
    assert_ne!(changed, body.as_bytes());
    match client.publish(Kind::Spec, "human_distance", "1.0.0", &changed, "") {
        Err(ClientError::Conflict { existing, attempted, .. }) => {
            assert_eq!(existing, meta.digest);
            assert_eq!(attempted, sha256_hex(&changed));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(client.fetch(Kind::Spec, "nobody", "1.0.0"), Err(ClientError::NotFound(_))));
    assert!(matches!(
        client.publish(Kind::Spec, "human_distance", "1.0", body.as_bytes(), ""),
        Err(ClientError::Validation(_))
    ));
    assert!(matches!(
        client.publish(Kind::Spec, "human_distance", "1.0.1", b"{}", ""),
        Err(ClientError::Validation(_))
    ));
    assert!(client.versions(Kind::Spec, "nobody").unwrap().is_empty());
    assert_eq!(client.versions(Kind::Spec, "human_distance").unwrap(), vec![meta]);
}

#[test]
fn query_routes() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServerHandle::start(Store::open(dir.path()).unwrap(), local()).unwrap();
    let client = Client::new(&server.url()).unwrap();
    assert!(client.query(Kind::Spec, None, Some("human-safety")).unwrap().is_empty());
    for (name, body) in builtin_spec_documents() {
        client.publish(Kind::Spec, name, "1.0.0", body.as_bytes(), "").unwrap();
    }
    let tagged = client.query(Kind::Spec, None, Some("human-safety")).unwrap();
    assert_eq!(tagged.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(), ["human_distance"]);
    let prefixed = client.query(Kind::Spec, Some("batt"), None).unwrap();
    assert_eq!(prefixed.iter().map(|e| e.name.as_str()).collect::<Vec<_>>(), ["battery_min"]);
    assert!(client.query(Kind::Tree, None, None).unwrap().is_empty());

    let tree = br#"{"kind": "Action", "name": "go_to_goal"}"#;
    client.publish(Kind::Tree, "errand", "0.1.0", tree, "").unwrap();
    assert_eq!(client.fetch(Kind::Tree, "errand", "0.1.0").unwrap(), tree);
    let bad_tree = br#"{"kind": "Inverter", "name": "not", "children": []}"#;
    match client.publish(Kind::Tree, "broken", "0.1.0", bad_tree, "") {
        Err(ClientError::Validation(e)) => assert!(e[0].contains("/not"), "{e:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn records_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let body = doc("speed_limit");
    {
        let server = ServerHandle::start(Store::open(dir.path()).unwrap(), local()).unwrap();
        let client = Client::new(&server.url()).unwrap();
        client.publish(Kind::Spec, "speed_limit", "1.0.0", body.as_bytes(), "").unwrap();
        server.stop().unwrap();
    }
    let server = ServerHandle::start(Store::open(dir.path()).unwrap(), local()).unwrap();
    let client = Client::new(&server.url()).unwrap();
    assert_eq!(client.fetch(Kind::Spec, "speed_limit", "1.0.0").unwrap(), body.as_bytes());
    assert!(Store::open(dir.path()).unwrap().audit().unwrap().clean());
}

#[test]
fn concurrent_publishes() {
    let dir = tempfile::tempdir().unwrap();
    let server = ServerHandle::start(Store::open(dir.path()).unwrap(), local()).unwrap();
    let url = server.url();
    let n = 16;
    let gate = Arc::new(Barrier::new(n));

    // distinct names: all succeed
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let (url, gate) = (url.clone(), gate.clone());
            thread::spawn(move || {
                let client = Client::new(&url).unwrap();
                let body = variant(&format!("spec_{i}"), "1.0.0", "distinct");
                gate.wait();
                client.publish(Kind::Spec, &format!("spec_{i}"), "1.0.0", body.as_bytes(), "")
            })
        })
        .collect();
    for h in handles {
        assert!(h.join().unwrap().unwrap().1);
    }

    // same name and version, different bytes: exactly one winner
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let (url, gate) = (url.clone(), gate.clone());
            thread::spawn(move || {
                let client = Client::new(&url).unwrap();
                let body = variant("contested", "1.0.0", &format!("writer {i}"));
                gate.wait();
                (body.clone(), client.publish(Kind::Spec, "contested", "1.0.0", body.as_bytes(), ""))
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let winners: Vec<_> = results.iter().filter(|(_, r)| r.is_ok()).collect();
    assert_eq!(winners.len(), 1);
    assert!(results.iter().filter(|(_, r)| r.is_err()).all(|(_, r)| matches!(r, Err(ClientError::Conflict { .. }))));
    let client = Client::new(&url).unwrap();
    assert_eq!(client.fetch(Kind::Spec, "contested", "1.0.0").unwrap(), winners[0].0.as_bytes());

    // same bytes: all succeed, exactly one creates
    let handles: Vec<_> = (0..n)
        .map(|_| {
            let (url, gate) = (url.clone(), gate.clone());
            thread::spawn(move || {
                let client = Client::new(&url).unwrap();
                let body = variant("shared", "2.0.0", "same");
                gate.wait();
                client.publish(Kind::Spec, "shared", "2.0.0", body.as_bytes(), "").unwrap().1
            })
        })
        .collect();
    let created = handles.into_iter().map(|h| h.join().unwrap()).filter(|c| *c).count();
    assert_eq!(created, 1);

    let report = Store::open(dir.path()).unwrap().audit().unwrap();
    assert!(report.clean(), "{report:?}");
    assert_eq!(report.records, n + 2);
}
