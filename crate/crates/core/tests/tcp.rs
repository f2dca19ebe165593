mod common;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::{vector, ScriptedClient};
use fedrs::client::{start_client, ClientOptions};
use fedrs::server::{run, ClientManager, ServerConfig};
use fedrs::strategy::{FedAvg, FedAvgConfig};
use fedrs::transport::{serve, ServerEndpoint, TcpDialer, TransportError};

fn endpoint(addr: &str) -> ServerEndpoint {
    ServerEndpoint {
        bind_address: addr.into(),
        max_clients: 16,
        read_timeout: Duration::from_secs(10),
    }
}

#[test]
fn rounds_over_real_sockets() {
    let mgr = Arc::new(ClientManager::new(Duration::from_secs(10)));
    let server = serve(endpoint("127.0.0.1:0"), mgr.on_connect()).unwrap();
    let addr = server.local_addr().to_owned();
    let clients: Vec<_> = (0..3)
        .map(|i| {
            let addr = addr.clone();
            thread::spawn(move || {
                let mut c = ScriptedClient::new(i as f64, 1);
                start_client(&TcpDialer::new(addr), &mut c, &ClientOptions::named(format!("tcp{i}")))
            })
        })
        .collect();
    let mut s = FedAvg::new(FedAvgConfig::new(3, 1, 0.1, 0)).unwrap();
    let cfg = ServerConfig {
        num_rounds: 2,
        read_timeout: Duration::from_secs(10),
        min_available_clients: 3,
    };
    let out = run(&mut s, &mgr, &cfg, vector(&[0.0, 0.0]), None);
    assert!(out.error.is_none(), "{:?}", out.error);
    // Each round adds the mean shift (0 + 1 + 2) / 3.
    assert_eq!(out.final_weights.flatten_f64(), vec![2.0, 2.0]);
    assert_eq!(server.connected(), 3);
    server.shutdown();
    for c in clients {
        c.join().unwrap().unwrap();
    }
}

#[test]
fn occupied_port_is_a_bind_error() {
    let mgr = Arc::new(ClientManager::new(Duration::ZERO));
    let first = serve(endpoint("127.0.0.1:0"), mgr.on_connect()).unwrap();
    let err = serve(endpoint(first.local_addr()), mgr.on_connect()).err().unwrap();
    assert!(matches!(err, TransportError::Bind { .. }));
}

#[test]
fn dialing_nothing_is_retriable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let err = fedrs::transport::dial(&TcpDialer::new(addr), "x", Default::default()).err().unwrap();
    assert!(err.is_retriable());
}
