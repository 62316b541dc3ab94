// Client-side authorization matrix, mirrored from the server's rules.
// The server is authoritative; the console refuses to render routes and
// actions a session could never complete.

import type { Role, Session } from "./types.js";

export type Route =
  | { page: "login" }
  | { page: "link"; token: string }
  | { page: "vehicles" }
  | { page: "wizard"; vin: string }
  | { page: "dashboard"; vin: string };

// Driver-only consent steps: the person in the car has to do these.
export const DRIVER_ONLY_ACTIONS = new Set([
  "review",
  "confirm",
  "identity",
  "privacy",
  "transmission-test",
  "odometer-report",
]);

export function parseRoute(hash: string): Route {
  const cleaned = hash.replace(/^#\/?/, "");
  const [pathPart, queryPart] = cleaned.split("?", 2);
  const [head, ...rest] = pathPart.split("/");
  if (head === "link") {
    const params = new URLSearchParams(queryPart ?? "");
    return { page: "link", token: params.get("token") ?? "" };
  }
  if (head === "wizard" && rest[0]) return { page: "wizard", vin: rest[0] };
  if (head === "dashboard" && rest[0]) return { page: "dashboard", vin: rest[0] };
  if (head === "vehicles") return { page: "vehicles" };
  return { page: "login" };
}

export function canVisit(session: Session | null, route: Route): boolean {
  switch (route.page) {
    case "login":
    case "link":
      return true; // entry points
    case "vehicles":
    case "dashboard":
      return session?.role === "operator";
    case "wizard":
      if (session === null) return false;
      if (session.role === "operator") return true; // read-only view
      return session.vin === route.vin; // drivers act on their own car only
  }
}

export function canPerform(session: Session | null, action: string, vin: string): boolean {
  if (session === null) return false;
  if (session.role === "driver") {
    return session.vin === vin;
  }
  // operators manage enrollments but never complete driver-only steps
  return !DRIVER_ONLY_ACTIONS.has(action);
}

const STORAGE_KEY = "carconnect-session";

export function storeSession(session: Session | null): void {
  if (typeof sessionStorage === "undefined") return;
  if (session === null) sessionStorage.removeItem(STORAGE_KEY);
  else sessionStorage.setItem(STORAGE_KEY, JSON.stringify(session));
}

export function loadSession(): Session | null {
  if (typeof sessionStorage === "undefined") return null;
  const raw = sessionStorage.getItem(STORAGE_KEY);
  return raw ? (JSON.parse(raw) as Session) : null;
}
