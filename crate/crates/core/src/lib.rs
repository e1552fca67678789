pub mod api;
pub mod bridge;
pub mod broker;
pub mod codec;
pub mod harness;
pub mod mqttsn;
pub mod node;
pub mod robot;
pub mod server;
pub mod simnet;
pub mod time;
