/* A worker that holds its frame for a while. */
int32_t work(int32_t n) {
    trace("work begin %d", n);
    sleep(n);
    trace("work end v2 %d", n);
    return n + 1;
}

int32_t serve(int32_t n) {
    return work(n);
}
