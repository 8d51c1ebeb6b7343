export interface QueryBar {
  el: HTMLElement;
  setBusy(busy: boolean): void;
}

export function createQueryBar(
  onSearch: (text: string, k: number) => void,
): QueryBar {
  const el = document.createElement("form");
  el.className = "query-bar";

  const text = document.createElement("input");
  text.type = "text";
  text.placeholder = "query text (a record id in the text corpus)";
  text.className = "query-input";

  const k = document.createElement("input");
  k.type = "number";
  k.min = "1";
  k.value = "50";
  k.className = "k-input";
  k.title = "results to retrieve";

  const button = document.createElement("button");
  button.type = "submit";
  button.textContent = "Search";
  button.className = "search-button";

  el.append(text, k, button);
  el.addEventListener("submit", (event) => {
    event.preventDefault();
    const value = text.value.trim();
    if (value === "") return;
    const kValue = Math.max(1, Number(k.value) || 50);
    onSearch(value, kValue);
  });

  return {
    el,
    setBusy(busy: boolean) {
      button.disabled = busy;
    },
  };
}
