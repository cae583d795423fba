import { ApiClient } from "./api.js";
import { mountExplorer } from "./ui.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("api") ?? "http://127.0.0.1:8600";

mountExplorer(document.getElementById("app") as HTMLElement, new ApiClient(baseUrl));
