use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use radon_core::client::HttpClient;
use radon_core::local::{LocalCluster, LocalOptions};
use radon_core::messaging::Mailbox;
use radon_core::model::{AtomConfiguration, AtomName, Envelope, Inbound, Ordering, RecoveryPolicy};
use radon_core::node::Node;
use radon_kvstore::app::{self, kvnode_template, KVNODE};
use radon_kvstore::coordinator::COORDINATOR;
use radon_kvstore::kvnode::{data_key, live_value};
use radon_kvstore::protocol::{KvMessage, KvOp, KvRequest, Outcome};
use radon_kvstore::{ring_hash, RingView};

fn defs() -> Vec<radon_core::engine::AtomDefinition> {
    let mut defs = radon_core::builtins::definitions();
    defs.extend(app::definitions());
    defs
}

fn name(s: &str) -> AtomName {
    AtomName::new(s).unwrap()
}

async fn probe(node: &Node, who: &str) -> Arc<Mailbox> {
    let who = name(who);
    let inc = node.engine().naming().register(&who).await.unwrap();
    let mailbox = Arc::new(Mailbox::new(65536));
    node.engine().messaging().attach(who, inc, mailbox.clone());
    mailbox
}

fn send(node: &Node, from: &str, to: &str, message: KvMessage) {
    node.engine()
        .messaging()
        .send(Envelope {
            sender: name(from),
            destination: name(to).into(),
            ordering: Ordering::Fifo,
            payload: message.encode(),
            correlation_id: None,
        })
        .unwrap();
}

async fn next_message(mailbox: &Mailbox) -> KvMessage {
    match mailbox.receive(Some(Duration::from_secs(10))).await.unwrap() {
        Inbound::Message(env) => KvMessage::decode(env.payload).unwrap(),
        Inbound::Event(_) => panic!("unexpected event"),
    }
}

async fn ring_members(client: &mut HttpClient) -> Vec<String> {
    let (status, body) = client.get("/ring").await.unwrap();
    if status != 200 {
        return Vec::new();
    }
    let value: serde_json::Value = serde_json::from_slice(&body).unwrap();
    value["members"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m.as_str().unwrap().to_string())
        .collect()
}

async fn wait_members(client: &mut HttpClient, expected: usize) -> Vec<String> {
    for _ in 0..500 {
        let members = ring_members(client).await;
        if members.len() == expected {
            return members;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("ring did not reach {expected} members");
}

fn view_of(members: &[String], replication: usize) -> RingView {
    RingView::from_parts(1, replication, members.iter().map(|m| name(m))).unwrap()
}

/// Live copies of `key` across every node's store.
fn holders(cluster: &LocalCluster, members: &[String], key: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    for node in &cluster.nodes {
        for member in members {
            if let Some(v) = node.engine().storage().get(&data_key(&name(member), key)) {
                if live_value(&v).is_some() {
                    out.push(member.clone());
                }
            }
        }
    }
    out.sort();
    out
}

#[tokio::test]
async fn coordinator_tracks_joins_and_broadcasts() {
    let cluster = LocalCluster::start(1, LocalOptions { http: false, ..LocalOptions::default() }, defs)
        .await
        .unwrap();
    let node = &cluster.nodes[0];
    node.engine()
        .spawn_daemon(AtomConfiguration::daemon(COORDINATOR, COORDINATOR).with_arg("replication", 2))
        .await
        .unwrap();
    let a = probe(node, "m/a").await;
    let b = probe(node, "m/b").await;
    let c = probe(node, "m/c").await;

    send(node, "m/a", COORDINATOR, KvMessage::Topology);
    let KvMessage::View(empty) = next_message(&a).await else { panic!() };
    assert_eq!((empty.version(), empty.len()), (0, 0));

    for (i, (member, mailbox)) in [("m/a", &a), ("m/b", &b), ("m/c", &c)].into_iter().enumerate() {
        send(node, member, COORDINATOR, KvMessage::Join(name(member)));
        let KvMessage::View(view) = next_message(mailbox).await else { panic!() };
        assert_eq!(view.version(), i as u64 + 1);
        assert_eq!(view.len(), i + 1);
    }
    // Earlier members were told about each later join.
    for expected in [2, 3] {
        let KvMessage::View(view) = next_message(&a).await else { panic!() };
        assert_eq!(view.version(), expected);
    }
    let KvMessage::View(view) = next_message(&b).await else { panic!() };
    assert!(view.contains(&name("m/c")));

    // A duplicate join leaves the view unchanged.
    send(node, "m/b", COORDINATOR, KvMessage::Join(name("m/b")));
    let KvMessage::View(view) = next_message(&b).await else { panic!() };
    assert_eq!(view.version(), 3);
    cluster.shutdown();
}

#[tokio::test]
async fn put_get_replicates_and_forwards() {
    let cluster = LocalCluster::start(3, LocalOptions::default(), defs).await.unwrap();
    let report = cluster.deploy(&app::application("n1", 2, 2)).await;
    assert!(report.iter().all(|p| p.ok), "{report:?}");
    let http = cluster.http_addrs();
    let mut client = HttpClient::connect(&http[1]).await.unwrap();
    let members = wait_members(&mut client, 6).await;

    assert_eq!(client.get("/kv/absent").await.unwrap().0, 404);
    for i in 0..50 {
        let (status, _) = client.put(&format!("/kv/key{i}"), format!("value{i}")).await.unwrap();
        assert_eq!(status, 200);
    }
    let mut other = HttpClient::connect(&http[2]).await.unwrap();
    for i in 0..50 {
        let (status, body) = other.get(&format!("/kv/key{i}")).await.unwrap();
        assert_eq!((status, body), (200, Bytes::from(format!("value{i}"))));
    }
    let view = view_of(&members, 2);
    for i in 0..50 {
        let key = format!("key{i}");
        let mut expected: Vec<String> = view
            .responsible_set(key.as_bytes())
            .unwrap()
            .iter()
            .map(|m| m.to_string())
            .collect();
        expected.sort();
        assert_eq!(holders(&cluster, &members, key.as_bytes()), expected);
    }

    // A get sent to a member outside the responsible set is forwarded.
    let key = Bytes::from_static(b"key7");
    let responsible = view.responsible_set(&key).unwrap();
    let outsider = members
        .iter()
        .find(|m| !responsible.contains(&name(m)))
        .unwrap()
        .clone();
    let mailbox = probe(&cluster.nodes[0], "probe").await;
    assert!(cluster.converged(Duration::from_secs(5)).await);
    send(
        &cluster.nodes[0],
        "probe",
        &outsider,
        KvMessage::Request(KvRequest {
            op: KvOp::Get { key },
            reply_to: name("probe"),
            correlation_id: 77,
            hops: 0,
            written: Vec::new(),
        }),
    );
    let KvMessage::Response(response) = next_message(&mailbox).await else { panic!() };
    assert_eq!(response.correlation_id, 77);
    assert_eq!(response.outcome, Outcome::Ok(Some(Bytes::from_static(b"value7"))));

    assert_eq!(client.request("DELETE", "/kv/key1", Bytes::new()).await.unwrap().0, 404);
    assert_eq!(client.request("POST", "/kv/key1", Bytes::new()).await.unwrap().0, 404);
    cluster.shutdown();
}

#[tokio::test]
async fn joiner_takes_over_its_range() {
    let cluster = LocalCluster::start(3, LocalOptions::default(), defs).await.unwrap();
    let report = cluster.deploy(&app::application("n1", 1, 2)).await;
    assert!(report.iter().all(|p| p.ok), "{report:?}");
    let http = cluster.http_addrs();
    let mut client = HttpClient::connect(&http[0]).await.unwrap();
    let before = wait_members(&mut client, 3).await;

    let joiner = "kvnode/n2/9".to_string();
    let mut after_members = before.clone();
    after_members.push(joiner.clone());
    let old_view = view_of(&before, 2);
    let new_view = view_of(&after_members, 2);
    // Keys whose primary moves to the joiner, picked with the hash.
    let moving: Vec<String> = (0..5000)
        .map(|i| format!("k{i}"))
        .filter(|k| new_view.primary(k.as_bytes()).unwrap().as_str() == joiner)
        .take(20)
        .collect();
    assert_eq!(moving.len(), 20);
    let staying: Vec<String> = (0..40).map(|i| format!("s{i}")).collect();
    for key in moving.iter().chain(&staying) {
        assert_eq!(client.put(&format!("/kv/{key}"), key.clone()).await.unwrap().0, 200);
    }
    assert!(moving
        .iter()
        .all(|k| !old_view.responsible_set(k.as_bytes()).unwrap().contains(&name(&joiner))));

    let report = cluster
        .deploy(&[AtomConfiguration::daemon(KVNODE, "kvnode/{node}/9")
            .with_hosts(&["n2"])
            .with_recovery(RecoveryPolicy::Restart)])
        .await;
    assert!(report[0].ok, "{report:?}");
    let members = wait_members(&mut client, 4).await;
    assert!(members.contains(&joiner));
    assert_eq!(ring_hash(joiner.as_bytes()), ring_hash(joiner.as_bytes()));

    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    loop {
        let placed = moving.iter().chain(&staying).all(|key| {
            let mut expected: Vec<String> = new_view
                .responsible_set(key.as_bytes())
                .unwrap()
                .iter()
                .map(|m| m.to_string())
                .collect();
            expected.sort();
            holders(&cluster, &members, key.as_bytes()) == expected
        });
        if placed {
            break;
        }
        assert!(std::time::Instant::now() < deadline, "placement did not converge");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let mut fresh = HttpClient::connect(&http[2]).await.unwrap();
    for key in moving.iter().chain(&staying) {
        let (status, body) = fresh.get(&format!("/kv/{key}")).await.unwrap();
        assert_eq!((status, &body[..]), (200, key.as_bytes()));
    }
    cluster.shutdown();
}

#[test]
fn kvnode_template_names() {
    assert_eq!(kvnode_template(3), "kvnode/{node}/3");
}
