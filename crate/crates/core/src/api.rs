//! Typed client for the hub and provider HTTP+JSON surfaces.

use serde::de::DeserializeOwned;

use crate::model::{HubAddress, NodeUrl};
use crate::transport::{call_typed, ApiRequest, CallError, Method, Transport};
use crate::wire::*;

/// Calls other nodes on behalf of `from`.
#[derive(Clone, Copy)]
pub struct Client<'a> {
    pub transport: &'a dyn Transport,
    pub from: &'a NodeUrl,
}

impl<'a> Client<'a> {
    pub fn new(transport: &'a dyn Transport, from: &'a NodeUrl) -> Self {
        Self { transport, from }
    }

    fn call<T: DeserializeOwned>(&self, to: &NodeUrl, req: ApiRequest) -> Result<T, CallError> {
        call_typed(self.transport, self.from, to, req)
    }

    fn defer(&self, to: &NodeUrl, req: ApiRequest) {
        self.transport.post_deferred(self.from, to, req)
    }

    // ---- hub ----

    pub fn create_account(
        &self,
        hub: &HubAddress,
        req: &CreateAccountRequest,
    ) -> Result<CreateAccountResponse, CallError> {
        self.call(hub.url(), ApiRequest::post("/accounts", req))
    }

    pub fn register_row(
        &self,
        hub: &HubAddress,
        account: &AccountId,
        req: &RegisterRowRequest,
    ) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::post(format!("/accounts/{account}/rows"), req))
    }

    pub fn delete_row(&self, hub: &HubAddress, account: &AccountId, req: &DeleteRowRequest) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::new(Method::Delete, format!("/accounts/{account}/rows")).with_body(req))
    }

    pub fn install_temp(&self, hub: &HubAddress, notice: &RotationNotice) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::new(Method::Put, "/rows/temp").with_body(notice))
    }

    pub fn discover(&self, hub: &HubAddress, req: &DiscoveryRequest) -> Result<DiscoveryAccepted, CallError> {
        self.call(hub.url(), ApiRequest::post("/discover", req))
    }

    pub fn inbox(&self, hub: &HubAddress, account: &AccountId, wait_secs: u64) -> Result<InboxResponse, CallError> {
        self.call(hub.url(), ApiRequest::get(format!("/accounts/{account}/inbox")).with_query("wait", wait_secs))
    }

    pub fn submit_decision(
        &self,
        hub: &HubAddress,
        account: &AccountId,
        req: &DecisionRequest,
    ) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::post(format!("/accounts/{account}/decisions"), req))
    }

    pub fn relay(&self, hub: &HubAddress, request_id: &RequestId, payload: &RelayPayload) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::post(format!("/relay/{request_id}"), payload))
    }

    pub fn renew_all(
        &self,
        hub: &HubAddress,
        account: &AccountId,
        req: &SignedRequest,
    ) -> Result<RenewalReport, CallError> {
        self.call(hub.url(), ApiRequest::post(format!("/accounts/{account}/renew"), req))
    }

    pub fn migrate(
        &self,
        hub: &HubAddress,
        account: &AccountId,
        req: &MigrateRequest,
    ) -> Result<RenewalReport, CallError> {
        self.call(hub.url(), ApiRequest::post(format!("/accounts/{account}/migrate"), req))
    }

    pub fn delete_account(&self, hub: &HubAddress, account: &AccountId, req: &SignedRequest) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::new(Method::Delete, format!("/accounts/{account}")).with_body(req))
    }

    pub fn hub_health(&self, hub: &HubAddress) -> Result<Ack, CallError> {
        self.call(hub.url(), ApiRequest::get("/health"))
    }

    /// Hub → requester delivery of the final outcome.
    pub fn deliver_result(&self, requester: &NodeUrl, resp: &DiscoveryResponse) {
        self.defer(requester, ApiRequest::post("/d2/result", resp))
    }

    pub fn notify_rotation_needed(&self, issuer: &NodeUrl, event: &RotationNeeded) {
        self.defer(issuer, ApiRequest::post("/d2/rotate", event))
    }

    pub fn forward_mediated(&self, issuer: &NodeUrl, fwd: &MediatedForward) {
        self.defer(issuer, ApiRequest::post("/d2/verify-mediated", fwd))
    }

    // ---- provider ----

    pub fn login(&self, provider: &NodeUrl, req: &LoginRequest) -> Result<LoginResponse, CallError> {
        self.call(provider, ApiRequest::post("/login", req))
    }

    pub fn issue(&self, provider: &NodeUrl, req: &IssueRequest) -> Result<IssueResponse, CallError> {
        self.call(provider, ApiRequest::post("/d2/issue", req))
    }

    pub fn complete(&self, provider: &NodeUrl, req: &CompleteRequest) -> Result<Ack, CallError> {
        self.call(provider, ApiRequest::post("/d2/complete", req))
    }

    pub fn lookup(&self, provider: &NodeUrl, req: &LookupRequest) -> Result<LookupResponse, CallError> {
        self.call(provider, ApiRequest::post("/d2/lookup", req))
    }

    pub fn verify(&self, provider: &NodeUrl, query: &PredicateQuery) -> Result<Attestation, CallError> {
        self.call(provider, ApiRequest::post("/d2/verify", query))
    }

    pub fn verify_mediated(&self, provider: &NodeUrl, fwd: &MediatedForward) -> Result<Ack, CallError> {
        self.call(provider, ApiRequest::post("/d2/verify-mediated", fwd))
    }

    pub fn renew_identity(&self, provider: &NodeUrl, demand: &RenewalDemand) -> Result<RenewalGrant, CallError> {
        self.call(provider, ApiRequest::post("/d2/renew", demand))
    }

    pub fn issuer_info(&self, provider: &NodeUrl) -> Result<IssuerInfo, CallError> {
        self.call(provider, ApiRequest::get("/.well-known/d2-issuer"))
    }
}
