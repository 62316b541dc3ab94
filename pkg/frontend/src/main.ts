// Application shell: hash routing, session handling, page rendering.

import { ApiClient, ApiError } from "./api.js";
import { CHART_KINDS, REFRESH_INTERVAL_MS, describeTrip, loadDashboard } from "./dashboard.js";
import { markerPopupText, seriesChart, trajectoryMap } from "./charts.js";
import { clear, el, svgEl } from "./dom.js";
import {
  canPerform,
  canVisit,
  loadSession,
  parseRoute,
  storeSession,
  type Route,
} from "./session.js";
import type { ConsentRecord, Session } from "./types.js";
import {
  MECHANISM_INSTRUCTIONS,
  linkEntryView,
  odometerCountdownDays,
  reviewSheet,
  showRevokeControl,
  wizardNotices,
  wizardSteps,
} from "./wizard.js";

const api = new ApiClient("");
let session: Session | null = loadSession();
if (session) api.setToken(session.token);
let refreshTimer: number | null = null;
let pendingLinkToken: string | null = null;

const root = () => document.getElementById("app") as HTMLElement;

function setSession(next: Session | null): void {
  session = next;
  api.setToken(next?.token ?? null);
  storeSession(next);
  renderNav();
}

function go(hash: string): void {
  window.location.hash = hash;
}

function renderNav(): void {
  const nav = document.getElementById("nav") as HTMLElement;
  clear(nav);
  nav.append(el("span", { class: "brand" }, ["carconnect console"]));
  if (session?.role === "operator") {
    nav.append(el("a", { href: "#/vehicles" }, ["vehicles"]));
  }
  if (session) {
    const who = `${session.role}: ${session.subject}`;
    const logout = el("a", { href: "#/login" }, ["sign out"]);
    logout.addEventListener("click", () => setSession(null));
    nav.append(el("span", { class: "who" }, [who]), logout);
  }
}

function notice(text: string, tone = "info"): HTMLElement {
  return el("div", { class: `notice ${tone}` }, [text]);
}

function errorBox(err: unknown): HTMLElement {
  const message = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
  return notice(message, "error");
}

// -- pages -------------------------------------------------------------------

function renderLogin(): void {
  const container = el("div", { class: "card" });
  container.append(el("h2", {}, ["Sign in"]));
  const operatorId = el("input", { placeholder: "operator id", value: "operator" });
  const operatorBtn = el("button", {}, ["Operator session"]);
  operatorBtn.addEventListener("click", async () => {
    try {
      const created = await api.createOperatorSession((operatorId as HTMLInputElement).value || "operator");
      setSession(created);
      go("#/vehicles");
    } catch (err) {
      container.append(errorBox(err));
    }
  });
  const linkInput = el("input", { placeholder: "paste your consent link token" });
  const linkBtn = el("button", {}, ["Open consent link"]);
  linkBtn.addEventListener("click", () => {
    const token = (linkInput as HTMLInputElement).value.trim();
    if (token) go(`#/link?token=${encodeURIComponent(token)}`);
  });
  container.append(
    el("div", { class: "row" }, [operatorId, operatorBtn]),
    el("p", { class: "hint" }, ["Drivers: use the link from your enrollment email instead."]),
    el("div", { class: "row" }, [linkInput, linkBtn]),
  );
  clear(root());
  root().append(container);
}

async function renderLinkEntry(token: string): Promise<void> {
  clear(root());
  try {
    const created = await api.sessionFromLink(token);
    pendingLinkToken = token;
    setSession(created);
    go(`#/wizard/${created.vin}`);
  } catch (err) {
    const view = linkEntryView(err instanceof ApiError ? err : { status: 0, code: "Unknown" });
    const card = el("div", { class: "card" });
    card.append(el("h2", {}, [view.kind === "expired" ? "Link expired" : "Link not valid"]));
    card.append(notice(view.kind === "ok" ? "" : view.message, "warn"));
    card.append(el("p", {}, ["Once you have a fresh link, paste it on the sign-in screen."]));
    const back = el("button", {}, ["Back to sign-in"]);
    back.addEventListener("click", () => go("#/login"));
    card.append(back);
    root().append(card);
  }
}

async function renderVehicles(): Promise<void> {
  clear(root());
  const card = el("div", { class: "card wide" });
  card.append(el("h2", {}, ["Fleet"]));
  try {
    const [vehicles, consents, outcomes] = await Promise.all([
      api.vehicles(),
      api.consents(),
      api.eligibility(),
    ]);
    const consentByVin = new Map(consents.map((c) => [c.vin, c]));
    const outcomeByVin = new Map(outcomes.map((o) => [o.vin, o]));
    const table = el("table", {});
    table.append(
      el("tr", {}, [
        el("th", {}, ["VIN"]),
        el("th", {}, ["vehicle"]),
        el("th", {}, ["eligibility"]),
        el("th", {}, ["consent"]),
        el("th", {}, [""]),
      ]),
    );
    for (const vehicle of vehicles) {
      const consent = consentByVin.get(vehicle.vin);
      const outcome = outcomeByVin.get(vehicle.vin);
      const cells = el("tr", {}, [
        el("td", { class: "mono" }, [vehicle.vin]),
        el("td", {}, [`${vehicle.brand} ${vehicle.model} (${vehicle.production_year})`]),
        el("td", {}, [outcome ? outcome.vin_check : "unchecked"]),
        el("td", {}, [consent ? consent.state : "-"]),
      ]);
      const actions = el("td", {});
      const dash = el("a", { href: `#/dashboard/${vehicle.vin}` }, ["dashboard"]);
      actions.append(dash);
      const wizard = el("a", { href: `#/wizard/${vehicle.vin}`, class: "spaced" }, ["consent"]);
      actions.append(wizard);
      cells.append(actions);
      table.append(cells);
    }
    card.append(table);
  } catch (err) {
    card.append(errorBox(err));
  }
  root().append(card);
}

async function renderWizard(vin: string): Promise<void> {
  clear(root());
  const card = el("div", { class: "card wide" });
  card.append(el("h2", {}, [`Consent for ${vin}`]));
  root().append(card);
  let record: ConsentRecord | null = null;
  try {
    record = await api.consent(vin);
  } catch (err) {
    if (err instanceof ApiError && err.status === 404 && session?.role === "operator") {
      // operator can start a new enrollment
      const email = el("input", { placeholder: "driver email" });
      const start = el("button", {}, ["Send enrollment email"]);
      start.addEventListener("click", async () => {
        try {
          const created = await api.initiateConsent(vin, (email as HTMLInputElement).value);
          card.append(notice(`Email sent. One-time link token: ${created.link_token ?? ""}`, "info"));
          await renderWizard(vin);
        } catch (inner) {
          card.append(errorBox(inner));
        }
      });
      card.append(el("p", {}, ["No consent yet for this vehicle."]), el("div", { class: "row" }, [email, start]));
      return;
    }
    card.append(errorBox(err));
    return;
  }

  const [{ now }, vehicle] = await Promise.all([api.simClock(), api.vehicle(vin)]);
  const profile = await api.profile(vehicle.brand);

  for (const item of wizardNotices(record, now)) {
    card.append(notice(item.text, item.tone));
  }

  const steps = wizardSteps(record);
  const list = el("ol", { class: "steps" });
  for (const step of steps) {
    const line = el("li", { class: `step ${step.status}` }, [
      el("strong", {}, [step.title]),
      el("div", { class: "hint" }, [step.description]),
    ]);
    if (step.status === "current" && canPerform(session, step.action ?? "", vin)) {
      line.append(await stepControl(vin, step.id, record));
    }
    list.append(line);
  }
  card.append(list);

  if (record.state === "email_sent" || record.state === "initiated") {
    const sheet = reviewSheet(profile);
    const review = el("div", { class: "review" });
    review.append(el("h3", {}, [`Data points ${sheet.brand} will provide`]));
    review.append(
      el("p", {}, [`On request: ${sheet.requestKinds.join(", ")}`]),
      el("p", {}, [`By notification: ${sheet.notificationKinds.join(", ")}`]),
      el("p", {}, [`Data subscription: ${sheet.monthlyCostEur.toFixed(2)} EUR/month`]),
    );
    card.append(review);
  }

  if (showRevokeControl(record) && session) {
    const revoke = el("button", { class: "danger" }, ["Revoke consent"]);
    revoke.addEventListener("click", async () => {
      try {
        await api.consentAction(vin, "revoke", { source: "driver_portal" });
        await renderWizard(vin);
      } catch (err) {
        card.append(errorBox(err));
      }
    });
    card.append(el("div", { class: "row" }, [revoke]));
  }
}

async function stepControl(vin: string, stepId: string, record: ConsentRecord): Promise<HTMLElement> {
  const wrap = el("div", { class: "row" });
  const act = async (action: string, payload: Record<string, unknown>) => {
    try {
      await api.consentAction(vin, action, payload);
      await renderWizard(vin);
    } catch (err) {
      wrap.append(errorBox(err));
    }
  };
  switch (stepId) {
    case "review": {
      const approve = el("button", {}, ["I consent"]);
      approve.addEventListener("click", () =>
        act("review", { link_token: pendingLinkToken ?? record.link_token, approved: true }),
      );
      const decline = el("button", { class: "danger" }, ["Decline"]);
      decline.addEventListener("click", () =>
        act("review", { link_token: pendingLinkToken ?? record.link_token, approved: false }),
      );
      wrap.append(approve, decline);
      break;
    }
    case "confirm": {
      const approve = el("button", {}, ["I confirmed on the portal"]);
      approve.addEventListener("click", () => act("confirm", { approved: true }));
      wrap.append(approve);
      break;
    }
    case "identity": {
      const done = el("button", {}, ["Identity verified"]);
      done.addEventListener("click", () => act("identity", { passed: true }));
      wrap.append(done);
      break;
    }
    case "privacy": {
      const { privacy_mechanism } = await api.requiredMechanism(vin);
      wrap.append(notice(MECHANISM_INSTRUCTIONS[privacy_mechanism] ?? privacy_mechanism, "info"));
      const done = el("button", {}, ["Settings configured"]);
      done.addEventListener("click", () => act("privacy", { mechanism: privacy_mechanism }));
      wrap.append(done);
      break;
    }
    case "transmission-test": {
      const run = el("button", {}, ["Start the six-minute test"]);
      run.addEventListener("click", () => act("transmission-test", {}));
      wrap.append(run);
      break;
    }
    case "odometer-report": {
      const km = el("input", { placeholder: "current odometer (km)", type: "number" });
      const send = el("button", {}, ["Report mileage"]);
      send.addEventListener("click", () => act("odometer-report", { km: Number((km as HTMLInputElement).value) }));
      wrap.append(km, send);
      break;
    }
  }
  return wrap;
}

async function renderDashboard(vin: string, selectedTrip: number | null = null): Promise<void> {
  if (refreshTimer !== null) window.clearInterval(refreshTimer);
  const card = el("div", { class: "card wide" });
  clear(root());
  root().append(card);

  const draw = async (selection: number | null) => {
    try {
      const data = await loadDashboard(api, vin, selection);
      clear(card);
      card.append(el("h2", {}, [`Vehicle ${vin}`]), el("p", { class: "hint" }, [`simulated time: ${data.now}`]));
      for (const kind of CHART_KINDS) {
        const model = seriesChart(data.series[kind]);
        const block = el("div", { class: "chart" });
        block.append(el("h3", {}, [kind.replace(/_/g, " ")]));
        if (model.empty) {
          block.append(notice("no data collected yet for this series", "info"));
        } else {
          const svg = svgEl("svg", { viewBox: "0 0 640 180", class: "line-chart" });
          for (const tick of model.yTicks) {
            svg.append(svgEl("line", { x1: "34", x2: "632", y1: String(tick.y), y2: String(tick.y), class: "grid" }));
            const label = svgEl("text", { x: "2", y: String(tick.y + 3), class: "tick" });
            label.textContent = tick.label;
            svg.append(label);
          }
          for (const tick of model.xTicks) {
            const label = svgEl("text", { x: String(tick.x), y: "176", class: "tick middle" });
            label.textContent = tick.label;
            svg.append(label);
          }
          svg.append(svgEl("path", { d: model.path, class: "series" }));
          block.append(svg);
        }
        card.append(block);
      }

      const tripsBlock = el("div", { class: "chart" });
      tripsBlock.append(el("h3", {}, ["trips"]));
      if (data.trips.length === 0) {
        tripsBlock.append(notice("no trips recovered yet (dense cadence fills this view)", "info"));
      } else {
        const select = el("select", {});
        data.trips.forEach((trip, index) => {
          const option = el("option", { value: String(index) }, [describeTrip(trip, index)]);
          if (index === data.selectedTrip) option.setAttribute("selected", "selected");
          select.append(option);
        });
        select.addEventListener("change", () => draw(Number((select as HTMLSelectElement).value)));
        tripsBlock.append(el("div", { class: "row" }, [select]));
        if (data.track) {
          const model = trajectoryMap(data.track.points, data.roads);
          if (!model.empty) {
            const svg = svgEl("svg", { viewBox: "0 0 520 420", class: "map" });
            for (const road of model.roadPaths) {
              svg.append(svgEl("path", { d: road.path, class: `road ${road.road_class}` }));
            }
            svg.append(svgEl("path", { d: model.trackPath, class: "track" }));
            for (const marker of model.markers) {
              const dot = svgEl("circle", { cx: String(marker.x), cy: String(marker.y), r: "4", class: "marker" });
              const title = svgEl("title");
              title.textContent = markerPopupText(marker.point);
              dot.append(title);
              svg.append(dot);
            }
            if (model.start) svg.append(svgEl("circle", { cx: String(model.start.x), cy: String(model.start.y), r: "6", class: "start" }));
            if (model.end) svg.append(svgEl("rect", { x: String((model.end?.x ?? 0) - 5), y: String((model.end?.y ?? 0) - 5), width: "10", height: "10", class: "finish" }));
            tripsBlock.append(svg);
          }
        }
      }
      card.append(tripsBlock);
    } catch (err) {
      clear(card);
      card.append(errorBox(err));
    }
  };

  await draw(selectedTrip);
  refreshTimer = window.setInterval(() => draw(selectedTrip), REFRESH_INTERVAL_MS);
}

// -- router --------------------------------------------------------------------

async function route(): Promise<void> {
  if (refreshTimer !== null) {
    window.clearInterval(refreshTimer);
    refreshTimer = null;
  }
  const current: Route = parseRoute(window.location.hash);
  if (!canVisit(session, current)) {
    clear(root());
    root().append(
      el("div", { class: "card" }, [
        el("h2", {}, ["Not allowed"]),
        notice("This page is not available for your session.", "warn"),
      ]),
    );
    return;
  }
  switch (current.page) {
    case "login":
      renderLogin();
      break;
    case "link":
      await renderLinkEntry(current.token);
      break;
    case "vehicles":
      await renderVehicles();
      break;
    case "wizard":
      await renderWizard(current.vin);
      break;
    case "dashboard":
      await renderDashboard(current.vin);
      break;
  }
}

window.addEventListener("hashchange", () => void route());
window.addEventListener("DOMContentLoaded", () => {
  renderNav();
  void route();
});
