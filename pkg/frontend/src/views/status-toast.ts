export interface StatusToast {
  el: HTMLElement;
  show(message: string, kind?: "info" | "error"): void;
}

export function createStatusToast(hideAfterMs = 4000): StatusToast {
  const el = document.createElement("div");
  el.className = "status-toast";
  el.hidden = true;

  let timer: ReturnType<typeof setTimeout> | null = null;

  return {
    el,
    show(message, kind = "info") {
      el.textContent = message;
      el.className = `status-toast toast-${kind}`;
      el.hidden = false;
      if (timer !== null) clearTimeout(timer);
      timer = setTimeout(() => {
        el.hidden = true;
        timer = null;
      }, hideAfterMs);
    },
  };
}
