int32_t total = 0;

int32_t add(int64_t v) {
    total = total + v;
    return 0;
}

int64_t report(void) {
    emit(total);
    return total;
}
