use ratchetlab_core::client::{Device, SessionBook};
use ratchetlab_core::crypto::Entropy;
use ratchetlab_core::key_store::KeyStore;
use ratchetlab_core::metadata::{build_graph, infer_groups, InferenceParams};
use ratchetlab_core::server::{EventKind, ManualClock, Registration, Server};
use std::sync::Arc;

fn device(server: &Server, id: &str, rng: &mut Entropy) -> Device {
    let mut store = KeyStore::generate(id, 20, rng, 0).unwrap();
    server.register(Registration::from_store(&mut store), false).unwrap();
    Device::new(store)
}

#[test]
fn out_of_order_delivery_and_persistence() {
    let server = Server::new(ManualClock::new(0));
    let mut rng = Entropy::insecure_seeded(10);
    let mut a = device(&server, "+15550000001", &mut rng);
    let mut b = device(&server, "+15550000002", &mut rng);

    let envs: Vec<_> =
        (0..5).map(|i| a.seal_for(&server, "+15550000002", format!("m{i}").as_bytes(), &mut rng).unwrap()).collect();
    for i in [4, 0, 2, 1, 3] {
        assert_eq!(b.receive(&envs[i]).unwrap(), format!("m{i}").into_bytes());
    }
    assert!(b.receive(&envs[2]).is_err());

    // Both devices survive a save/load cycle mid-conversation.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.keys.jsonl");
    b.store.save(&path).unwrap();
    let book: SessionBook = serde_json::from_str(&serde_json::to_string(&b.book).unwrap()).unwrap();
    let mut b = Device::with_sessions(KeyStore::load(&path).unwrap(), book);

    let reply = b.send(&server, "+15550000001", b"got them", &mut rng).unwrap();
    assert_eq!(a.receive(&reply).unwrap(), b"got them");
    assert!(a.session("+15550000002").unwrap().pending_handshake.is_none());
    let next = a.encrypt("+15550000002", b"no handshake now").unwrap();
    assert!(next.handshake.is_none());
    assert_eq!(b.receive(&next).unwrap(), b"no handshake now");
}

#[test]
fn group_fan_out_is_visible_in_metadata() {
    let clock = Arc::new(ManualClock::new(1_000));
    let server = Server::new(clock.clone());
    let mut rng = Entropy::insecure_seeded(11);
    let ids = ["+15550000001", "+15550000002", "+15550000003", "+15550000004"];
    let mut devices: Vec<_> = ids.iter().map(|id| device(&server, id, &mut rng)).collect();
    server.create_group("book-club", ids.iter().map(|s| s.to_string())).unwrap();

    for round in 0..3 {
        clock.advance(60_000);
        let sender = round % ids.len();
        devices[sender].send_group(&server, "book-club", b"chapter three?", &mut rng).unwrap();
        clock.advance(100);
        for (i, d) in devices.iter_mut().enumerate() {
            if i != sender {
                let got = d.receive_all(&server).unwrap();
                assert_eq!(got.len(), 1);
                assert_eq!(got[0].1.as_ref().unwrap(), b"chapter three?");
            }
        }
    }

    let ledger = server.ledger();
    let relayed = ledger.iter().filter(|r| r.event == EventKind::MessageRelayed).count();
    assert_eq!(relayed, 9);
    assert!(ledger.windows(2).all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
    assert_eq!(build_graph(&ledger).edges.len(), 9);
    let labeled = infer_groups(&ledger, &InferenceParams::labeled());
    assert_eq!(labeled.len(), 1);
    assert_eq!(labeled[0].members.len(), 4);
}

#[test]
fn non_member_cannot_send_to_group() {
    let server = Server::new(ManualClock::new(0));
    let mut rng = Entropy::insecure_seeded(12);
    let ids = ["+15550000001", "+15550000002", "+15550000003"];
    for id in ids {
        device(&server, id, &mut rng);
    }
    let mut outsider = device(&server, "+15550000009", &mut rng);
    server.create_group("g", ids.iter().map(|s| s.to_string())).unwrap();
    assert!(outsider.send_group(&server, "g", b"let me in", &mut rng).is_err());
    assert!(outsider.send_group(&server, "missing", b"x", &mut rng).is_err());
}
