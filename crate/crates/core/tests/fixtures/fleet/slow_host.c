/* The slow worker, with a short idle gap between requests. */
int32_t work(int32_t n) {
    trace("work begin %d", n);
    sleep(n);
    trace("work end %d", n);
    return n;
}

int32_t serve(int32_t n) {
    sleep(1000);
    return work(n);
}
