//! Whole federations inside one process, over the in-memory transport.
//!
//! The server side is the same accept loop and round engine used over TCP;
//! each client runs [`start_client`] on its own thread.

use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::client::{start_client, Client, ClientOptions, ClientRunError};
use crate::server::{ClientManager, ServerError};
use crate::sim::{LinkProfile, ShapedStream};
use crate::transport::{
    serve_listener, Dialer, LoopbackNetwork, PipeStats, ServerEndpoint, ServerHandle, Stream,
    TransportError,
};

/// Dials the loopback network and remembers the byte counters of every
/// client-side stream it hands out.
struct CountingDialer {
    network: LoopbackNetwork,
    link: LinkProfile,
    stats: Arc<Mutex<Vec<PipeStats>>>,
}

impl Dialer for CountingDialer {
    fn dial(&self) -> Result<Box<dyn Stream>, TransportError> {
        let stream = self.network.connect().map_err(|source| TransportError::Connect {
            address: "loopback".into(),
            source,
        })?;
        self.stats.lock().unwrap().push(stream.stats());
        if self.link.is_unlimited() {
            Ok(Box::new(stream))
        } else {
            Ok(Box::new(ShapedStream::new(stream, self.link)))
        }
    }

    fn address(&self) -> String {
        "loopback".into()
    }
}

pub struct LocalClient {
    pub name: String,
    thread: JoinHandle<Result<(), ClientRunError>>,
    stats: Arc<Mutex<Vec<PipeStats>>>,
}

impl LocalClient {
    /// Bytes this client has written and read across all its connections.
    pub fn traffic(&self) -> (u64, u64) {
        let stats = self.stats.lock().unwrap();
        (
            stats.iter().map(|s| s.sent()).sum(),
            stats.iter().map(|s| s.received()).sum(),
        )
    }
}

pub struct LocalFederation {
    network: LoopbackNetwork,
    server: Option<ServerHandle>,
    manager: Arc<ClientManager>,
    clients: Vec<LocalClient>,
}

impl LocalFederation {
    /// `sample_wait` bounds how long sampling waits for clients to connect.
    pub fn start(sample_wait: Duration) -> Self {
        let network = LoopbackNetwork::new();
        let manager = Arc::new(ClientManager::new(sample_wait));
        let endpoint = ServerEndpoint {
            bind_address: "loopback".into(),
            max_clients: usize::MAX,
            read_timeout: Duration::from_secs(10),
        };
        let server = serve_listener(Box::new(network.listen()), endpoint, manager.on_connect());
        Self {
            network,
            server: Some(server),
            manager,
            clients: Vec::new(),
        }
    }

    pub fn manager(&self) -> &Arc<ClientManager> {
        &self.manager
    }

    /// Starts `client` on its own thread, announcing itself as `name`.
    pub fn spawn<C: Client + 'static>(&mut self, name: impl Into<String>, client: C, link: LinkProfile) {
        let name = name.into();
        let stats = Arc::new(Mutex::new(Vec::new()));
        let dialer = CountingDialer {
            network: self.network.clone(),
            link,
            stats: Arc::clone(&stats),
        };
        let options = ClientOptions::named(name.clone());
        let thread = thread::Builder::new()
            .name(format!("client-{name}"))
            .spawn(move || {
                let mut client = client;
                start_client(&dialer, &mut client, &options)
            })
            .expect("spawn client thread");
        self.clients.push(LocalClient {
            name,
            thread,
            stats,
        });
    }

    /// Blocks until every spawned client has registered.
    pub fn wait_connected(&self, wait: Duration) -> Result<(), ServerError> {
        self.manager.wait_for_within(self.clients.len(), wait).map(|_| ())
    }

    pub fn clients(&self) -> &[LocalClient] {
        &self.clients
    }

    /// Total bytes written by all client-side streams, in both directions.
    pub fn client_traffic(&self) -> (u64, u64) {
        self.clients.iter().fold((0, 0), |(s, r), c| {
            let (cs, cr) = c.traffic();
            (s + cs, r + cr)
        })
    }

    /// Sends every client `ReconnectIns{0}` and joins the client threads.
    pub fn shutdown(mut self) -> Vec<(String, Result<(), ClientRunError>)> {
        if let Some(server) = self.server.take() {
            server.shutdown();
        }
        self.manager.clear();
        self.clients
            .drain(..)
            .map(|c| (c.name, c.thread.join().expect("client thread panicked")))
            .collect()
    }
}
