// Thin typed client over the platform HTTP API. The console holds no
// business logic: every state change goes through these calls.

import type {
  ConsentRecord,
  EligibilityOutcome,
  OemProfile,
  RiskFeatures,
  RoadSegment,
  SeriesPoint,
  Session,
  TripSummary,
  TripTrack,
  Vehicle,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    detail: string,
  ) {
    super(detail);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private token: string | null = null;

  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  setToken(token: string | null): void {
    this.token = token;
  }

  private async request<T>(method: string, path: string, body?: unknown, params?: Record<string, string>): Promise<T> {
    let url = this.base + path;
    if (params && Object.keys(params).length > 0) {
      url += "?" + new URLSearchParams(params).toString();
    }
    const headers: Record<string, string> = {};
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    const response = await this.fetchImpl(url, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    const payload = text ? JSON.parse(text) : null;
    if (!response.ok) {
      const code = payload?.error ?? "HttpError";
      const detail = payload?.detail ?? response.statusText;
      throw new ApiError(response.status, code, detail);
    }
    return payload as T;
  }

  // -- sessions ------------------------------------------------------------

  createOperatorSession(operatorId: string): Promise<Session> {
    return this.request("POST", "/sessions", { role: "operator", operator_id: operatorId });
  }

  sessionFromLink(linkToken: string): Promise<Session> {
    return this.request("POST", "/sessions/from-link", { link_token: linkToken });
  }

  // -- catalog ---------------------------------------------------------------

  profiles(): Promise<OemProfile[]> {
    return this.request("GET", "/profiles");
  }

  profile(brand: string): Promise<OemProfile> {
    return this.request("GET", `/profiles/${brand}`);
  }

  vehicles(): Promise<Vehicle[]> {
    return this.request("GET", "/vehicles");
  }

  vehicle(vin: string): Promise<Vehicle> {
    return this.request("GET", `/vehicles/${vin}`);
  }

  eligibility(): Promise<EligibilityOutcome[]> {
    return this.request("GET", "/eligibility");
  }

  runEligibility(vin: string): Promise<EligibilityOutcome> {
    return this.request("POST", `/eligibility/${vin}/check`, {});
  }

  // -- consents -----------------------------------------------------------------

  consents(): Promise<ConsentRecord[]> {
    return this.request("GET", "/consents");
  }

  consent(vin: string): Promise<ConsentRecord> {
    return this.request("GET", `/consents/${vin}`);
  }

  initiateConsent(vin: string, driverEmail: string): Promise<ConsentRecord> {
    return this.request("POST", "/consents", { vin, driver_email: driverEmail });
  }

  consentAction(vin: string, action: string, payload: Record<string, unknown> = {}): Promise<ConsentRecord> {
    return this.request("POST", `/consents/${vin}/actions/${action}`, payload);
  }

  requiredMechanism(vin: string): Promise<{ vin: string; privacy_mechanism: string }> {
    return this.request("GET", `/consents/${vin}/mechanism`);
  }

  // -- telemetry ------------------------------------------------------------------

  series(vin: string, kind: string, opts: { start?: string; end?: string; downsampleS?: number } = {}): Promise<SeriesPoint[]> {
    const params: Record<string, string> = { kind };
    if (opts.start) params.start = opts.start;
    if (opts.end) params.end = opts.end;
    if (opts.downsampleS) params.downsample_s = String(opts.downsampleS);
    return this.request("GET", `/vehicles/${vin}/series`, undefined, params);
  }

  trips(vin: string): Promise<TripSummary[]> {
    return this.request("GET", `/vehicles/${vin}/trips`);
  }

  tripTrack(vin: string, index: number): Promise<TripTrack> {
    return this.request("GET", `/vehicles/${vin}/trips/${index}/track`);
  }

  risk(vin: string): Promise<RiskFeatures> {
    return this.request("GET", `/vehicles/${vin}/risk`);
  }

  mapRoads(): Promise<RoadSegment[]> {
    return this.request("GET", "/map/roads");
  }

  // -- simulation ------------------------------------------------------------------

  simClock(): Promise<{ now: string }> {
    return this.request("GET", "/sim/clock");
  }

  simAdvance(payload: { seconds?: number; days?: number }): Promise<{ now: string; events_fired: number }> {
    return this.request("POST", "/sim/advance", payload);
  }
}
