import { ServiceClient } from "./api";
import { ChatConsole } from "./view";

// Base URL comes from ?service=... when the console is served separately from
// the API; same-origin (vite proxy or co-hosting) otherwise.
const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("service") ?? "";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app root");

const console_ = new ChatConsole(root, new ServiceClient(baseUrl));
void console_.init();
