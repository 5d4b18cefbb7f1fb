//! Drives a server over a raw socket, playing the agent by hand.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use replicanet::cli::{Server, ServerOptions};
use replicanet::protocol::{Availability, DataReply, DataRequest, Heartbeat, HostId, Message, Outbound, ReplicaId};
use replicanet::record_server::{RecordLayout, RecordStore, StoreOptions};
use replicanet::scheduler::SchedulerConfig;
use replicanet::workload;

struct FakeAgent {
    out: TcpStream,
    lines: std::io::Lines<BufReader<TcpStream>>,
}

impl FakeAgent {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let out = TcpStream::connect(addr).unwrap();
        out.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let lines = BufReader::new(out.try_clone().unwrap()).lines();
        FakeAgent { out, lines }
    }

    fn send(&mut self, line: String) {
        self.out.write_all(line.as_bytes()).unwrap();
    }

    fn recv(&mut self) -> Outbound {
        let line = self.lines.next().expect("connection open").expect("line before timeout");
        Outbound::decode(&line).unwrap()
    }

    /// Skips control messages until a data reply arrives.
    fn reply(&mut self) -> DataReply {
        loop {
            if let Outbound::Data(r) = self.recv() {
                return r;
            }
        }
    }

    fn call(&mut self, req: DataRequest) -> DataReply {
        self.send(req.encode());
        self.reply()
    }
}

fn fast() -> ServerOptions {
    ServerOptions {
        scheduler: SchedulerConfig { tick_ms: 10, heartbeat_ms: 10, ..SchedulerConfig::default() },
        deadline: Some(Duration::from_secs(20)),
        ..ServerOptions::default()
    }
}

#[test]
fn hand_driven_replica_finishes_the_run() {
    let n = 5;
    let store = RecordStore::in_memory(workload::bank_store(n), RecordLayout::FixedSize(workload::record_bytes(n)), StoreOptions::default()).unwrap();
    let server = Server::bind("127.0.0.1:0", store, fast()).unwrap();
    let addr = server.local_addr();
    let serving = thread::spawn(move || server.run());

    let mut agent = FakeAgent::connect(addr);
    // Data before a heartbeat is refused.
    assert!(matches!(agent.call(DataRequest::Open(ReplicaId(9))), DataReply::Error { .. }));

    agent.send(Message::Heartbeat(Heartbeat { host_id: HostId(3), availability: Availability::FULL }).encode());
    let replica = match agent.recv() {
        Outbound::Control(Message::Launch { app_id, replica: Some(r) }) => {
            assert_eq!(app_id, "bank");
            r
        }
        other => panic!("expected a launch, got {other:?}"),
    };

    assert_eq!(agent.call(DataRequest::Open(replica)), DataReply::Opened(replica));
    let mut seen = Vec::new();
    loop {
        match agent.call(DataRequest::Read { replica, size: workload::record_bytes(n) }) {
            DataReply::Record { payload, .. } => {
                seen.push(payload.clone());
                let out = workload::increment_record(&payload).unwrap();
                assert_eq!(agent.call(DataRequest::Write { replica, payload: out }), DataReply::Ack(replica));
            }
            DataReply::EndOfData(_) => break,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(seen.len(), 5);
    assert_eq!(agent.call(DataRequest::Close(replica)), DataReply::Closed(replica));
    agent.send(Message::DatabaseDone(replica).encode());

    let summary = serving.join().unwrap().unwrap();
    assert_eq!(summary.records, 5);
    assert_eq!(summary.per_host.get(&HostId(3)), Some(&5));
    assert!(summary.command_log.iter().any(|l| l.contains("LAUNCH")));
}

#[test]
fn a_vanished_host_releases_its_opens() {
    let n = 3;
    let store = RecordStore::in_memory(workload::bank_store(n), RecordLayout::FixedSize(workload::record_bytes(n)), StoreOptions::default()).unwrap();
    let server = Server::bind("127.0.0.1:0", store, fast()).unwrap();
    let addr = server.local_addr();
    let serving = thread::spawn(move || server.run());

    // The first agent takes one record and disappears with the store open.
    let mut first = FakeAgent::connect(addr);
    first.send(Message::Heartbeat(Heartbeat { host_id: HostId(0), availability: Availability::FULL }).encode());
    let r = ReplicaId(77);
    assert_eq!(first.call(DataRequest::Open(r)), DataReply::Opened(r));
    assert!(matches!(first.call(DataRequest::Read { replica: r, size: workload::record_bytes(n) }), DataReply::Record { .. }));
    drop(first);

    // A second agent processes the rest; the run still ends.
    let mut second = FakeAgent::connect(addr);
    second.send(Message::Heartbeat(Heartbeat { host_id: HostId(1), availability: Availability::FULL }).encode());
    let r2 = ReplicaId(78);
    assert_eq!(second.call(DataRequest::Open(r2)), DataReply::Opened(r2));
    let mut got = 0;
    while let DataReply::Record { payload, .. } = second.call(DataRequest::Read { replica: r2, size: workload::record_bytes(n) }) {
        second.call(DataRequest::Write { replica: r2, payload: workload::increment_record(&payload).unwrap() });
        got += 1;
    }
    assert_eq!(got, 2);
    second.call(DataRequest::Close(r2));

    let summary = serving.join().unwrap().unwrap();
    assert_eq!(summary.per_host.values().sum::<u64>(), 3);
}

#[test]
fn binding_a_taken_port_fails() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let store = RecordStore::in_memory(Vec::new(), RecordLayout::FixedSize(4), StoreOptions::default()).unwrap();
    let err = Server::bind(held.local_addr().unwrap(), store, ServerOptions::default()).err().unwrap();
    assert!(err.to_string().starts_with("cannot listen"));
}
